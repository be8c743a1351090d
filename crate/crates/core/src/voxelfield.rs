//! Dense voxel radiance field and an emission-absorption volume renderer with
//! a hand-written backward pass.
//!
//! Densities pass through softplus and colors through a sigmoid; both are
//! trilinearly interpolated after activation. Ray math runs in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Checkpoint, Tensor};
use crate::camera::{
    ray_for_pixel, spherical_to_extrinsics, CameraExtrinsics, PinholeIntrinsics, RelativePose,
    SphericalPose,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::parallel;

pub const DEFAULT_GRID: usize = 64;
pub const DEFAULT_SAMPLES: usize = 96;
pub const BOUND: f64 = 0.5;
/// Range of the angular jitter used by the near-view loss, in radians.
pub const NEAR_VIEW_RANGE: f64 = 0.1;
const DEPTH_FLOOR: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Grid of raw density and color parameters over `[-0.5, 0.5]³`.
/// Voxel `(x, y, z)` lives at index `(z·N + y)·N + x`; its center is at
/// `-0.5 + (i + 0.5)/N` along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub density_raw: Vec<f32>,
    pub color_raw: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(resolution: usize, density_raw: f32, color_raw: f32) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid resolution {resolution} must be ≥ 2"
            )));
        }
        let n3 = resolution.pow(3);
        Ok(Self {
            resolution,
            density_raw: vec![density_raw; n3],
            color_raw: vec![color_raw; 3 * n3],
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.density_raw.len()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let h = 2.0 * BOUND / self.resolution as f64;
        [x, y, z].map(|i| -BOUND + (i as f64 + 0.5) * h)
    }

    /// Softplus-activated densities.
    pub fn density(&self) -> Vec<f64> {
        self.density_raw
            .iter()
            .map(|&r| softplus(r as f64))
            .collect()
    }

    pub fn activate(&self) -> Activated {
        Activated {
            n: self.resolution,
            sigma: self.density(),
            color: self.color_raw.iter().map(|&r| sigmoid(r as f64)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.density_raw
            .iter()
            .chain(&self.color_raw)
            .all(|v| v.is_finite())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let n = self.resolution;
        let mut ck = Checkpoint::new();
        ck.push(
            "grid.density",
            Tensor::new(vec![n, n, n], self.density_raw.clone()).expect("grid shape"),
        );
        ck.push(
            "grid.color",
            Tensor::new(vec![n, n, n, 3], self.color_raw.clone()).expect("grid shape"),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let d = ck
            .get("grid.density")
            .ok_or_else(|| Error::Checkpoint("missing grid.density".into()))?;
        let c = ck
            .get("grid.color")
            .ok_or_else(|| Error::Checkpoint("missing grid.color".into()))?;
        let n = d.shape.first().copied().unwrap_or(0);
        if d.shape != [n, n, n] || c.shape != [n, n, n, 3] || n < 2 {
            return Err(Error::Checkpoint(format!(
                "grid shapes {:?} and {:?} are inconsistent",
                d.shape, c.shape
            )));
        }
        Ok(Self {
            resolution: n,
            density_raw: d.data.clone(),
            color_raw: c.data.clone(),
        })
    }
}

/// Activated grid values, computed once per render.
#[derive(Debug, Clone)]
pub struct Activated {
    n: usize,
    sigma: Vec<f64>,
    color: Vec<f64>,
}

/// Trilinear stencil: 8 voxel indices and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

/// Stencil for `p`, or `None` outside the grid bounds. Between the outermost
/// voxel centers and the boundary the edge value is held.
pub fn stencil(n: usize, p: [f64; 3]) -> Option<Stencil> {
    if p.iter().any(|&c| !(-BOUND..=BOUND).contains(&c)) {
        return None;
    }
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let u = (p[a] + BOUND) * n as f64 / (2.0 * BOUND) - 0.5;
        let base = u.floor().clamp(0.0, (n - 2) as f64);
        i0[a] = base as usize;
        f[a] = (u - base).clamp(0.0, 1.0);
    }
    let mut index = [0; 8];
    let mut weight = [0.0; 8];
    for k in 0..8 {
        let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
        index[k] = ((i0[2] + dz) * n + i0[1] + dy) * n + i0[0] + dx;
        let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
        let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
        let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
        weight[k] = wx * wy * wz;
    }
    Some(Stencil { index, weight })
}

impl Activated {
    fn lookup(&self, s: &Stencil) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for k in 0..8 {
            let (i, w) = (s.index[k], s.weight[k]);
            sigma += w * self.sigma[i];
            for c in 0..3 {
                rgb[c] += w * self.color[3 * i + c];
            }
        }
        (sigma, rgb)
    }
}

/// Activated `(σ, rgb)` at `p`; zero outside the bounds.
pub fn trilinear_sample(grid: &VoxelGrid, p: [f64; 3]) -> (f64, [f64; 3]) {
    match stencil(grid.resolution, p) {
        Some(s) => {
            let mut sigma = 0.0;
            let mut rgb = [0.0; 3];
            for k in 0..8 {
                let i = s.index[k];
                sigma += s.weight[k] * softplus(grid.density_raw[i] as f64);
                for c in 0..3 {
                    rgb[c] += s.weight[k] * sigmoid(grid.color_raw[3 * i + c] as f64);
                }
            }
            (sigma, rgb)
        }
        None => (0.0, [0.0; 3]),
    }
}

/// Parametric interval where the ray is inside the grid bounds.
pub fn ray_box(o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > BOUND {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-BOUND - o[a]) / d[a], (BOUND - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub resolution: usize,
    pub samples_per_ray: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            resolution: 64,
            samples_per_ray: DEFAULT_SAMPLES,
        }
    }
}

impl RenderSettings {
    pub fn intrinsics(&self) -> PinholeIntrinsics {
        PinholeIntrinsics::square(self.resolution)
    }
}

/// Per-pixel render results; `rgb` is row-major interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl RenderOutput {
    pub fn image(&self) -> Image {
        Image::from_pixels(
            self.width,
            self.height,
            self.rgb.iter().map(|&v| v as f32).collect(),
        )
        .expect("render shape")
    }
}

/// One composited sample along a ray.
#[derive(Debug, Clone, Copy)]
struct RaySample {
    stencil: Stencil,
    t: f64,
    delta: f64,
    rgb: [f64; 3],
    /// Transmittance after this sample.
    trans_after: f64,
    weight: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct RayResult {
    rgb: [f64; 3],
    depth_sum: f64,
    opacity: f64,
}

fn to_arr(v: nalgebra::Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Marches one ray with `samples` midpoint-stratified samples over the
/// bounds intersection. Composites over a white background.
fn march(
    act: &Activated,
    o: [f64; 3],
    d: [f64; 3],
    samples: usize,
    mut rec: Option<&mut Vec<RaySample>>,
) -> RayResult {
    let Some((t0, t1)) = ray_box(o, d) else {
        return RayResult {
            rgb: [1.0; 3],
            ..Default::default()
        };
    };
    let delta = (t1 - t0) / samples as f64;
    let mut trans = 1.0;
    let mut out = RayResult::default();
    for i in 0..samples {
        let t = t0 + (i as f64 + 0.5) * delta;
        let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        let Some(s) = stencil(act.n, p.map(|c| c.clamp(-BOUND, BOUND))) else {
            continue;
        };
        let (sigma, rgb) = act.lookup(&s);
        let keep = (-sigma * delta).exp();
        let w = trans * (1.0 - keep);
        for c in 0..3 {
            out.rgb[c] += w * rgb[c];
        }
        out.depth_sum += w * t;
        out.opacity += w;
        trans *= keep;
        if let Some(r) = rec.as_deref_mut() {
            r.push(RaySample {
                stencil: s,
                t,
                delta,
                rgb,
                trans_after: trans,
                weight: w,
            });
        }
    }
    for c in 0..3 {
        out.rgb[c] += trans;
    }
    out
}

/// Renders `grid` from a camera.
pub fn render(
    grid: &VoxelGrid,
    extr: &CameraExtrinsics,
    intr: &PinholeIntrinsics,
    samples_per_ray: usize,
) -> RenderOutput {
    render_activated(&grid.activate(), extr, intr, samples_per_ray)
}

pub fn render_activated(
    act: &Activated,
    extr: &CameraExtrinsics,
    intr: &PinholeIntrinsics,
    samples_per_ray: usize,
) -> RenderOutput {
    let (w, h) = (intr.width, intr.height);
    let rows = parallel::map_indexed(h, |y| {
        (0..w)
            .map(|x| {
                let (o, d) = ray_for_pixel(extr, intr, (x, y), (0.5, 0.5));
                march(act, to_arr(o), to_arr(d), samples_per_ray, None)
            })
            .collect::<Vec<_>>()
    });
    let mut out = RenderOutput {
        width: w,
        height: h,
        rgb: Vec::with_capacity(w * h * 3),
        depth: Vec::with_capacity(w * h),
        opacity: Vec::with_capacity(w * h),
    };
    for r in rows.into_iter().flatten() {
        out.rgb.extend(r.rgb);
        out.depth.push(r.depth_sum / r.opacity.max(DEPTH_FLOOR));
        out.opacity.push(r.opacity);
    }
    out
}

pub fn render_pose(
    grid: &VoxelGrid,
    pose: &SphericalPose,
    settings: &RenderSettings,
) -> RenderOutput {
    render(
        grid,
        &spherical_to_extrinsics(pose),
        &settings.intrinsics(),
        settings.samples_per_ray,
    )
}

/// Gradients with respect to the raw grid parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGrad {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl GridGrad {
    pub fn zeros(grid: &VoxelGrid) -> Self {
        Self {
            density: vec![0.0; grid.density_raw.len()],
            color: vec![0.0; grid.color_raw.len()],
        }
    }

    pub fn add_assign(&mut self, other: &GridGrad) {
        self.density
            .iter_mut()
            .zip(&other.density)
            .for_each(|(a, b)| *a += b);
        self.color
            .iter_mut()
            .zip(&other.color)
            .for_each(|(a, b)| *a += b);
    }

    pub fn max_abs(&self) -> f64 {
        self.density
            .iter()
            .chain(&self.color)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Upstream gradients of a scalar loss with respect to one render.
#[derive(Debug, Clone, Default)]
pub struct RenderCotangent {
    pub rgb: Vec<f64>,
    pub depth: Option<Vec<f64>>,
    pub opacity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct SampleGrad {
    stencil: Stencil,
    sigma: f64,
    rgb: [f64; 3],
}

const BACKWARD_ROWS: usize = 8;

/// Gradient of `Σ cot·output` with respect to the raw grid parameters.
///
/// Rays are re-marched and differentiated in parallel; the scatter into the
/// grid runs in pixel order so the result does not depend on thread count.
pub fn render_backward(
    grid: &VoxelGrid,
    act: &Activated,
    extr: &CameraExtrinsics,
    intr: &PinholeIntrinsics,
    samples_per_ray: usize,
    cot: &RenderCotangent,
) -> Result<GridGrad> {
    let (w, h) = (intr.width, intr.height);
    if cot.rgb.len() != w * h * 3
        || cot.depth.as_ref().is_some_and(|d| d.len() != w * h)
        || cot.opacity.as_ref().is_some_and(|d| d.len() != w * h)
    {
        return Err(Error::Shape {
            op: "render_backward",
            lhs: vec![h, w, 3],
            rhs: vec![cot.rgb.len()],
        });
    }
    let mut g_sigma = vec![0.0; act.sigma.len()];
    let mut g_color = vec![0.0; act.color.len()];
    for block in (0..h).step_by(BACKWARD_ROWS) {
        let rows = (h - block).min(BACKWARD_ROWS);
        let grads = parallel::map_indexed(rows * w, |k| {
            let (x, y) = (k % w, block + k / w);
            let pix = y * w + x;
            let (o, d) = ray_for_pixel(extr, intr, (x, y), (0.5, 0.5));
            let mut rec = Vec::with_capacity(samples_per_ray);
            let r = march(act, to_arr(o), to_arr(d), samples_per_ray, Some(&mut rec));
            let g_rgb = [cot.rgb[3 * pix], cot.rgb[3 * pix + 1], cot.rgb[3 * pix + 2]];
            let g_depth = cot.depth.as_ref().map_or(0.0, |v| v[pix]);
            let g_opac = cot.opacity.as_ref().map_or(0.0, |v| v[pix]);
            ray_backward(&rec, &r, g_rgb, g_depth, g_opac)
        });
        for ray in grads {
            for s in ray {
                for k in 0..8 {
                    let (i, wk) = (s.stencil.index[k], s.stencil.weight[k]);
                    g_sigma[i] += wk * s.sigma;
                    for c in 0..3 {
                        g_color[3 * i + c] += wk * s.rgb[c];
                    }
                }
            }
        }
    }
    let density = g_sigma
        .iter()
        .zip(&grid.density_raw)
        .map(|(g, &r)| g * sigmoid(r as f64))
        .collect();
    let color = g_color
        .iter()
        .zip(&act.color)
        .map(|(g, &c)| g * c * (1.0 - c))
        .collect();
    Ok(GridGrad { density, color })
}

/// Per-sample gradients for one ray. For any composited quantity
/// `Q = Σ wᵢfᵢ + T_N·f_bg`, `∂Q/∂σᵢ = δᵢ·(T_{i+1}·fᵢ − Σ_{j>i} wⱼfⱼ − T_N·f_bg)`.
fn ray_backward(
    rec: &[RaySample],
    r: &RayResult,
    g_rgb: [f64; 3],
    g_depth: f64,
    g_opac: f64,
) -> Vec<SampleGrad> {
    if rec.is_empty() {
        return Vec::new();
    }
    let m = r.opacity.max(DEPTH_FLOOR);
    let depth = r.depth_sum / m;
    let a = g_depth / m;
    let b = g_opac
        - if r.opacity > DEPTH_FLOOR {
            g_depth * depth / m
        } else {
            0.0
        };
    let f = |s: &RaySample| {
        g_rgb[0] * s.rgb[0] + g_rgb[1] * s.rgb[1] + g_rgb[2] * s.rgb[2] + a * s.t + b
    };
    let t_final = rec.last().map_or(1.0, |s| s.trans_after);
    let mut tail = t_final * (g_rgb[0] + g_rgb[1] + g_rgb[2]);
    let mut out = Vec::with_capacity(rec.len());
    for s in rec.iter().rev() {
        let fi = f(s);
        let d_sigma = s.delta * (s.trans_after * fi - tail);
        tail += s.weight * fi;
        out.push(SampleGrad {
            stencil: s.stencil,
            sigma: d_sigma,
            rgb: g_rgb.map(|g| g * s.weight),
        });
    }
    out.reverse();
    out
}

/// Average of the masked mean squared horizontal and vertical depth
/// differences; a pair counts only when both pixels have opacity > 0.5.
/// Returns the loss and its gradient with respect to depth.
pub fn depth_smoothness_loss(out: &RenderOutput) -> (f64, Vec<f64>) {
    let (w, h) = (out.width, out.height);
    let mut grad = vec![0.0; w * h];
    let on = |i: usize| out.opacity[i] > 0.5;
    let mut loss = 0.0;
    for (dx, dy) in [(1usize, 0usize), (0, 1)] {
        let mut pairs = Vec::new();
        for y in 0..h - dy.min(h) {
            for x in 0..w - dx.min(w) {
                let (i, j) = (y * w + x, (y + dy) * w + x + dx);
                if on(i) && on(j) {
                    pairs.push((i, j));
                }
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let n = pairs.len() as f64;
        for (i, j) in pairs {
            let d = out.depth[j] - out.depth[i];
            loss += 0.5 * d * d / n;
            grad[j] += d / n;
            grad[i] -= d / n;
        }
    }
    (loss, grad)
}

/// Mean squared RGB difference between two renders and its gradient with
/// respect to the first (the second gets the negation).
pub fn rgb_mse(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len().max(1) as f64;
    let loss = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let grad = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y) / n).collect();
    (loss, grad)
}

/// Camera `pose` rotated by `(dθ, dφ)`.
pub fn perturbed_pose(pose: &SphericalPose, d_theta: f64, d_phi: f64) -> Result<SphericalPose> {
    pose.offset(&RelativePose::new(d_theta, d_phi, 0.0))
}

pub fn draw_near_offset<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    (
        rng.random_range(-NEAR_VIEW_RANGE..=NEAR_VIEW_RANGE),
        rng.random_range(-NEAR_VIEW_RANGE..=NEAR_VIEW_RANGE),
    )
}

/// RGB MSE between the render at `pose` and at a nearby pose offset by
/// `(dθ, dφ)`.
pub fn near_view_loss_at(
    grid: &VoxelGrid,
    pose: &SphericalPose,
    offset: (f64, f64),
    settings: &RenderSettings,
) -> Result<f64> {
    let a = render_pose(grid, pose, settings);
    let b = render_pose(grid, &perturbed_pose(pose, offset.0, offset.1)?, settings);
    Ok(rgb_mse(&a.rgb, &b.rgb).0)
}

/// Near-view consistency with offsets drawn uniformly from `±NEAR_VIEW_RANGE`.
pub fn near_view_consistency_loss<R: Rng + ?Sized>(
    grid: &VoxelGrid,
    pose: &SphericalPose,
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<f64> {
    let off = draw_near_offset(rng);
    near_view_loss_at(grid, pose, off, settings)
}

fn check_target(settings: &RenderSettings, x: &Image) -> Result<()> {
    if x.width != settings.resolution || x.height != settings.resolution {
        return Err(Error::InvalidArgument(format!(
            "target is {}x{}, render resolution is {}",
            x.width, x.height, settings.resolution
        )));
    }
    Ok(())
}

/// MSE between the render at `input_pose` and `x`.
pub fn input_view_loss(
    grid: &VoxelGrid,
    input_pose: &SphericalPose,
    x: &Image,
    settings: &RenderSettings,
) -> Result<f64> {
    check_target(settings, x)?;
    let out = render_pose(grid, input_pose, settings);
    let target: Vec<f64> = x.pixels.iter().map(|&v| v as f64).collect();
    Ok(rgb_mse(&out.rgb, &target).0)
}

/// Input-view loss and its gradient with respect to the raw grid.
pub fn input_view_loss_grad(
    grid: &VoxelGrid,
    input_pose: &SphericalPose,
    x: &Image,
    settings: &RenderSettings,
) -> Result<(f64, GridGrad)> {
    check_target(settings, x)?;
    let act = grid.activate();
    let extr = spherical_to_extrinsics(input_pose);
    let intr = settings.intrinsics();
    let out = render_activated(&act, &extr, &intr, settings.samples_per_ray);
    let target: Vec<f64> = x.pixels.iter().map(|&v| v as f64).collect();
    let (loss, g) = rgb_mse(&out.rgb, &target);
    let cot = RenderCotangent {
        rgb: g,
        ..Default::default()
    };
    let grad = render_backward(grid, &act, &extr, &intr, settings.samples_per_ray, &cot)?;
    Ok((loss, grad))
}

/// Largest relative disagreement between [`input_view_loss_grad`] and central
/// differences, probing every `stride`-th raw density and color entry.
pub fn input_view_fd_check(
    grid: &VoxelGrid,
    pose: &SphericalPose,
    x: &Image,
    settings: &RenderSettings,
    stride: usize,
) -> Result<f64> {
    let (_, grad) = input_view_loss_grad(grid, pose, x, settings)?;
    let eps = 1e-3f32;
    let mut worst: f64 = 0.0;
    for density in [true, false] {
        let len = if density {
            grid.density_raw.len()
        } else {
            grid.color_raw.len()
        };
        for i in (0..len).step_by(stride.max(1)) {
            let analytic = if density {
                grad.density[i]
            } else {
                grad.color[i]
            };
            let (mut a, mut b) = (grid.clone(), grid.clone());
            let (pa, pb) = if density {
                (&mut a.density_raw[i], &mut b.density_raw[i])
            } else {
                (&mut a.color_raw[i], &mut b.color_raw[i])
            };
            *pa += eps;
            *pb -= eps;
            // f32 storage rounds the step, so divide by what was applied.
            let step = (*pa - *pb) as f64;
            let fd = (input_view_loss(&a, pose, x, settings)?
                - input_view_loss(&b, pose, x, settings)?)
                / step;
            if analytic.abs() + fd.abs() < 1e-9 {
                continue;
            }
            worst = worst.max((analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-8));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::SphericalPose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(n: usize, seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = VoxelGrid::new(n, 0.0, 0.0).unwrap();
        g.density_raw
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-2.0..3.0));
        g.color_raw
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-2.0..2.0));
        g
    }

    #[test]
    fn voxel_center_is_exact() {
        let g = random_grid(8, 1);
        for (x, y, z) in [(0, 0, 0), (3, 5, 2), (7, 7, 7), (7, 0, 4)] {
            let (s, c) = trilinear_sample(&g, g.voxel_center(x, y, z));
            let i = g.index(x, y, z);
            assert!((s - softplus(g.density_raw[i] as f64)).abs() < 1e-12);
            assert!((c[1] - sigmoid(g.color_raw[3 * i + 1] as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_grid_and_outside() {
        let g = VoxelGrid::new(5, 1.5, -0.5).unwrap();
        for p in [[0.0, 0.0, 0.0], [0.49, -0.5, 0.3], [0.12, 0.33, -0.41]] {
            let (s, c) = trilinear_sample(&g, p);
            assert!((s - softplus(1.5)).abs() < 1e-12);
            assert!((c[2] - sigmoid(-0.5)).abs() < 1e-12);
        }
        assert_eq!(trilinear_sample(&g, [0.6, 0.0, 0.0]), (0.0, [0.0; 3]));
    }

    #[test]
    fn trilinear_density_gradient() {
        let g = random_grid(6, 2);
        let p = [0.03, -0.21, 0.17];
        let s = stencil(6, p).unwrap();
        for k in 0..8 {
            let i = s.index[k];
            let analytic = s.weight[k] * sigmoid(g.density_raw[i] as f64);
            let eps = 1e-3f32;
            let (mut a, mut b) = (g.clone(), g.clone());
            a.density_raw[i] += eps;
            b.density_raw[i] -= eps;
            let step = (a.density_raw[i] - b.density_raw[i]) as f64;
            let fd = (trilinear_sample(&a, p).0 - trilinear_sample(&b, p).0) / step;
            let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-8);
            assert!(rel < 1e-3, "{k}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn empty_field_renders_white() {
        let g = VoxelGrid::new(8, -100.0, 0.0).unwrap();
        let pose = SphericalPose::new(1.0, 0.3, 2.0).unwrap();
        let out = render_pose(
            &g,
            &pose,
            &RenderSettings {
                resolution: 16,
                samples_per_ray: 32,
            },
        );
        assert!(out.rgb.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(out.opacity.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn half_alpha_segment() {
        // σ·δ = ln 2 on a single sample gives α = 1/2.
        let act = Activated {
            n: 2,
            sigma: vec![std::f64::consts::LN_2; 8],
            color: vec![0.0; 24],
        };
        let r = march(&act, [0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 1, None);
        assert!((r.opacity - 0.5).abs() < 1e-12);
        assert!((r.rgb[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weights_partition_unity() {
        let g = random_grid(8, 3);
        let act = g.activate();
        let mut rec = Vec::new();
        let r = march(
            &act,
            [0.1, -0.2, -2.0],
            [0.05, 0.1, 1.0],
            96,
            Some(&mut rec),
        );
        let sum: f64 = rec.iter().map(|s| s.weight).sum::<f64>() + rec.last().unwrap().trans_after;
        assert!((sum - 1.0).abs() < 1e-5);
        assert!((r.opacity - (1.0 - rec.last().unwrap().trans_after)).abs() < 1e-12);
    }

    #[test]
    fn slab_depth() {
        // Dense slab filling z ≥ 0 inside the box; camera on the -z axis.
        let n = 32;
        let mut g = VoxelGrid::new(n, -30.0, 0.0).unwrap();
        for z in n / 2..n {
            for y in 0..n {
                for x in 0..n {
                    let i = g.index(x, y, z);
                    g.density_raw[i] = 2000.0;
                }
            }
        }
        let pose = SphericalPose::new(std::f64::consts::PI, 0.0, 2.0).unwrap();
        let settings = RenderSettings {
            resolution: 8,
            samples_per_ray: 96,
        };
        let out = render_pose(&g, &pose, &settings);
        let c = 4 * 8 + 4;
        let spacing = 1.0 / 96.0;
        assert!(out.opacity[c] > 0.999);
        // front face at distance 2, blurred by half a voxel of interpolation
        let expect = 2.0 - 0.5 / n as f64;
        assert!(
            (out.depth[c] - expect).abs() < spacing + 0.5 / n as f64,
            "{}",
            out.depth[c]
        );
    }

    #[test]
    fn doubling_density_never_lowers_opacity() {
        let g = random_grid(8, 4);
        let mut g2 = g.clone();
        for v in &mut g2.density_raw {
            // softplus⁻¹(2·softplus(r))
            let s = 2.0 * softplus(*v as f64);
            *v = (s.exp() - 1.0).ln() as f32;
        }
        let pose = SphericalPose::new(0.9, 2.0, 1.8).unwrap();
        let st = RenderSettings {
            resolution: 12,
            samples_per_ray: 48,
        };
        let (a, b) = (render_pose(&g, &pose, &st), render_pose(&g2, &pose, &st));
        for (x, y) in a.opacity.iter().zip(&b.opacity) {
            assert!(y + 1e-9 >= *x);
        }
    }

    /// Scalar re-implementation used as the reference.
    fn smoothness_oracle(depth: &[f64], opac: &[f64], w: usize, h: usize) -> f64 {
        let mut hs = (0.0, 0usize);
        let mut vs = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w && opac[i] > 0.5 && opac[i + 1] > 0.5 {
                    hs.0 += (depth[i + 1] - depth[i]).powi(2);
                    hs.1 += 1;
                }
                if y + 1 < h && opac[i] > 0.5 && opac[i + w] > 0.5 {
                    vs.0 += (depth[i + w] - depth[i]).powi(2);
                    vs.1 += 1;
                }
            }
        }
        let m = |s: (f64, usize)| if s.1 == 0 { 0.0 } else { s.0 / s.1 as f64 };
        0.5 * (m(hs) + m(vs))
    }

    fn output(w: usize, h: usize, depth: Vec<f64>, opacity: Vec<f64>) -> RenderOutput {
        RenderOutput {
            width: w,
            height: h,
            rgb: vec![1.0; w * h * 3],
            depth,
            opacity,
        }
    }

    #[test]
    fn smoothness_cases() {
        let (w, h) = (6, 5);
        let flat = output(w, h, vec![1.3; w * h], vec![1.0; w * h]);
        assert_eq!(depth_smoothness_loss(&flat).0, 0.0);
        let ramp: Vec<f64> = (0..w * h).map(|i| (i % w) as f64).collect();
        let r = output(w, h, ramp.clone(), vec![1.0; w * h]);
        assert!((depth_smoothness_loss(&r).0 - 0.5).abs() < 1e-12);
        assert!(
            (depth_smoothness_loss(&r).0 - smoothness_oracle(&ramp, &r.opacity, w, h)).abs()
                < 1e-12
        );
        let clear = output(w, h, ramp, vec![0.0; w * h]);
        assert_eq!(depth_smoothness_loss(&clear).0, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..3.0)).collect();
            let o: Vec<f64> = (0..w * h).map(|_| rng.random()).collect();
            let out = output(w, h, d.clone(), o.clone());
            let (l, g) = depth_smoothness_loss(&out);
            assert!((l - smoothness_oracle(&d, &o, w, h)).abs() < 1e-12);
            let i = 13;
            let mut dp = d.clone();
            dp[i] += 1e-6;
            let fd = (smoothness_oracle(&dp, &o, w, h) - l) / 1e-6;
            assert!((fd - g[i]).abs() < 1e-4);
        }
    }

    fn textured_cube() -> VoxelGrid {
        let n = 16;
        let mut g = VoxelGrid::new(n, -20.0, 0.0).unwrap();
        for z in 4..12 {
            for y in 4..12 {
                for x in 4..12 {
                    let i = g.index(x, y, z);
                    g.density_raw[i] = 300.0;
                    let checker = ((x / 2 + y / 2 + z / 2) % 2) as f32;
                    g.color_raw[3 * i] = 4.0 * checker - 2.0;
                    g.color_raw[3 * i + 1] = 1.0;
                    g.color_raw[3 * i + 2] = -2.0 + 3.0 * (x as f32 / n as f32);
                }
            }
        }
        g
    }

    #[test]
    fn near_view_behaviour() {
        let st = RenderSettings {
            resolution: 24,
            samples_per_ray: 48,
        };
        let pose = SphericalPose::new(1.1, 0.7, 1.8).unwrap();
        let cube = textured_cube();
        assert_eq!(
            near_view_loss_at(&cube, &pose, (0.0, 0.0), &st).unwrap(),
            0.0
        );
        let empty = VoxelGrid::new(8, -100.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(near_view_consistency_loss(&empty, &pose, &st, &mut rng).unwrap() < 1e-20);
        let losses: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&m| near_view_loss_at(&cube, &pose, (m, m), &st).unwrap())
            .collect();
        assert!(losses[0] > 0.0);
        assert!(losses.windows(2).all(|p| p[1] < p[0]), "{losses:?}");
    }

    #[test]
    fn input_view_identities() {
        let st = RenderSettings {
            resolution: 10,
            samples_per_ray: 32,
        };
        let pose = SphericalPose::new(1.3, 4.0, 2.0).unwrap();
        let empty = VoxelGrid::new(8, -100.0, 0.0).unwrap();
        assert!(input_view_loss(&empty, &pose, &Image::white(10, 10), &st).unwrap() < 1e-20);
        let g = random_grid(8, 6);
        let own = render_pose(&g, &pose, &st).image();
        assert!(input_view_loss(&g, &pose, &own, &st).unwrap() < 1e-12);
        assert!(input_view_loss(&g, &pose, &Image::white(12, 12), &st).is_err());
    }

    #[test]
    fn input_view_gradient_matches_finite_differences() {
        let g = random_grid(8, 7);
        let st = RenderSettings {
            resolution: 8,
            samples_per_ray: 24,
        };
        let pose = SphericalPose::new(1.0, 0.5, 1.6).unwrap();
        let x = Image::filled(8, 8, [0.2, 0.6, 0.9]);
        let err = input_view_fd_check(&g, &pose, &x, &st, 7).unwrap();
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn depth_and_opacity_gradients() {
        let g = random_grid(6, 8);
        let st = RenderSettings {
            resolution: 6,
            samples_per_ray: 20,
        };
        let pose = SphericalPose::new(2.0, 1.0, 1.7).unwrap();
        let extr = spherical_to_extrinsics(&pose);
        let intr = st.intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cd: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let co: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |g: &VoxelGrid| {
            let o = render(g, &extr, &intr, 20);
            o.depth.iter().zip(&cd).map(|(a, b)| a * b).sum::<f64>()
                + o.opacity.iter().zip(&co).map(|(a, b)| a * b).sum::<f64>()
        };
        let cot = RenderCotangent {
            rgb: vec![0.0; 108],
            depth: Some(cd.clone()),
            opacity: Some(co.clone()),
        };
        let grad = render_backward(&g, &g.activate(), &extr, &intr, 20, &cot).unwrap();
        for i in (0..g.density_raw.len()).step_by(5) {
            let eps = 1e-3f32;
            let (mut a, mut b) = (g.clone(), g.clone());
            a.density_raw[i] += eps;
            b.density_raw[i] -= eps;
            let step = (a.density_raw[i] - b.density_raw[i]) as f64;
            let fd = (objective(&a) - objective(&b)) / step;
            let an = grad.density[i];
            if an.abs() + fd.abs() < 1e-9 {
                continue;
            }
            assert!(
                (an - fd).abs() / (an.abs() + fd.abs() + 1e-8) < 1e-2,
                "{i}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let g = random_grid(4, 10);
        let back =
            VoxelGrid::from_checkpoint(&Checkpoint::decode(&g.checkpoint().encode()).unwrap())
                .unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn backward_is_deterministic() {
        let g = random_grid(8, 11);
        let st = RenderSettings {
            resolution: 16,
            samples_per_ray: 32,
        };
        let pose = SphericalPose::new(0.8, 5.0, 2.1).unwrap();
        let x = Image::filled(16, 16, [0.5, 0.1, 0.3]);
        let a = input_view_loss_grad(&g, &pose, &x, &st).unwrap();
        let b = input_view_loss_grad(&g, &pose, &x, &st).unwrap();
        assert_eq!(a, b);
    }
}
