//! Image metrics (PSNR, SSIM) and shape metrics (Chamfer distance,
//! volumetric IoU) with the unit-cube normalization they assume.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::meshing::TriMesh;
use crate::parallel;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SAMPLE_POINTS: usize = 2000;
pub const IOU_RESOLUTION: usize = 64;

fn check_same(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape {
            op,
            lhs: vec![a.height, a.width, 3],
            rhs: vec![b.height, b.width, 3],
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio with peak 1. Identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b, "psnr")?;
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.pixels.len().max(1) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn luminance(img: &Image) -> Vec<f64> {
    img.pixels
        .chunks_exact(3)
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully-contained 11×11 windows of the RGB-average
/// luminance.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let (la, lb) = (luminance(a), luminance(b));
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let wt = g[i] * g[j];
                    let k = (y + j) * w + x + i;
                    let (p, q) = (la[k], lb[k]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

pub type Point = [f64; 3];

fn bbox(points: &[Point]) -> Option<(Point, Point)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| {
        (
            [lo[0].min(p[0]), lo[1].min(p[1]), lo[2].min(p[2])],
            [hi[0].max(p[0]), hi[1].max(p[1]), hi[2].max(p[2])],
        )
    }))
}

/// Translates the bounding-box center to the origin and scales uniformly
/// so the longest side is 1.
pub fn normalize_points(points: &[Point]) -> Result<Vec<Point>> {
    let (lo, hi) = bbox(points).ok_or_else(|| Error::InvalidArgument("empty point set".into()))?;
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent > 0.0) {
        return Err(Error::InvalidArgument("point set has zero extent".into()));
    }
    let c = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    Ok(points
        .iter()
        .map(|p| [0, 1, 2].map(|a| (p[a] - c[a]) / extent))
        .collect())
}

pub fn normalize_mesh(mesh: &TriMesh) -> Result<TriMesh> {
    Ok(TriMesh {
        vertices: normalize_points(&mesh.vertices)?,
        triangles: mesh.triangles.clone(),
    })
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_points<R: Rng + ?Sized>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<Vec<Point>> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in &mesh.triangles {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::EmptyMesh);
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            // first triangle whose cumulative area exceeds u; zero-area
            // triangles never satisfy the strict inequality
            let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangles[k].map(|i| mesh.vertices[i]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            [0, 1, 2].map(|i| wa * a[i] + wb * b[i] + wc * c[i])
        })
        .collect())
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn check_clouds(a: &[Point], b: &[Point]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "chamfer of an empty point cloud".into(),
        ));
    }
    Ok(())
}

fn mean_nn(a: &[Point], nn: impl Fn(&Point) -> f64 + Sync) -> f64 {
    let d = parallel::map_indexed(a.len(), |i| nn(&a[i]).sqrt());
    d.iter().sum::<f64>() / a.len() as f64
}

/// Brute-force symmetric Chamfer distance with Euclidean distances:
/// `½·(mean_a min_b |a−b| + mean_b min_a |a−b|)`.
pub fn chamfer_brute(a: &[Point], b: &[Point]) -> Result<f64> {
    check_clouds(a, b)?;
    fn nn(set: &[Point]) -> impl Fn(&Point) -> f64 + Sync + '_ {
        move |p| {
            set.iter()
                .map(|q| dist2(p, q))
                .fold(f64::INFINITY, f64::min)
        }
    }
    Ok(0.5 * (mean_nn(a, nn(b)) + mean_nn(b, nn(a))))
}

/// Uniform hash grid for exact nearest-neighbor queries.
struct NnGrid<'a> {
    points: &'a [Point],
    lo: Point,
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NnGrid<'a> {
    fn new(points: &'a [Point]) -> Self {
        let (lo, hi) = bbox(points).expect("non-empty");
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-12);
        let per_axis = ((points.len() as f64).cbrt().ceil() as usize).max(1);
        let cell = extent / per_axis as f64;
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1));
        let mut grid = Self {
            points,
            lo,
            cell,
            dims,
            start: Vec::new(),
            order: Vec::new(),
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.coord(p))).collect();
        let mut count = vec![0usize; ncell + 1];
        for &k in &keys {
            count[k + 1] += 1;
        }
        for i in 0..ncell {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.start = count;
        grid.order = order;
        grid
    }

    fn coord(&self, p: &Point) -> [i64; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.lo[a]) / self.cell).floor() as i64;
            c.clamp(0, self.dims[a] as i64 - 1)
        })
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        (c[2] as usize * self.dims[1] + c[1] as usize) * self.dims[0] + c[0] as usize
    }

    /// Squared distance to the nearest point. Shells of cells are scanned
    /// outward until the best candidate is provably closer than any point in
    /// an unvisited cell.
    fn nearest2(&self, p: &Point) -> f64 {
        let c = self.coord(p);
        // distance from p to the boundary of its home cell box
        let home_lo = [0, 1, 2].map(|a| self.lo[a] + c[a] as f64 * self.cell);
        let slack = (0..3)
            .map(|a| {
                (p[a] - home_lo[a])
                    .min(home_lo[a] + self.cell - p[a])
                    .max(0.0)
            })
            .fold(f64::INFINITY, f64::min);
        let outside = (0..3)
            .map(|a| {
                let lo = self.lo[a];
                let hi = self.lo[a] + self.dims[a] as f64 * self.cell;
                (lo - p[a]).max(p[a] - hi).max(0.0)
            })
            .fold(0.0f64, |s, d| s + d * d)
            .sqrt();
        let max_ring = *self.dims.iter().max().expect("3 dims") as i64;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= self.dims[a] as i64) {
                            continue;
                        }
                        let k = self.flat(q);
                        for &i in &self.order[self.start[k]..self.start[k + 1]] {
                            best = best.min(dist2(p, &self.points[i]));
                        }
                    }
                }
            }
            // every unvisited cell is at least this far away
            let reach = outside.max(slack + ring as f64 * self.cell);
            if best.is_finite() && best.sqrt() <= reach {
                break;
            }
        }
        best
    }
}

/// Grid-accelerated Chamfer distance; bitwise equal to [`chamfer_brute`].
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    check_clouds(a, b)?;
    let (ga, gb) = (NnGrid::new(a), NnGrid::new(b));
    Ok(0.5 * (mean_nn(a, |p| gb.nearest2(p)) + mean_nn(b, |p| ga.nearest2(p))))
}

/// Boolean occupancy over `[-0.5, 0.5]³`, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub bits: Vec<bool>,
    /// False when the source mesh was not closed; parity is then best-effort.
    pub watertight: bool,
}

impl OccupancyGrid {
    pub fn occupied(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.occupied() as f64 / self.bits.len().max(1) as f64
    }
}

/// Occupancy of voxel centers by parity of crossings along +x. Rays are
/// nudged off the lattice by a tiny fixed offset so they avoid mesh edges.
pub fn voxelize(mesh: &TriMesh, resolution: usize) -> Result<OccupancyGrid> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let n = resolution;
    let h = 1.0 / n as f64;
    let center = |i: usize| -0.5 + (i as f64 + 0.5) * h;
    let (dy, dz) = (1.234_567e-7, 2.345_678e-7);
    let tris: Vec<[Point; 3]> = mesh
        .triangles
        .iter()
        .map(|t| t.map(|i| mesh.vertices[i]))
        .collect();
    let slabs = parallel::map_indexed(n, |z| {
        let pz = center(z) + dz;
        let mut out = vec![false; n * n];
        let mut hits = Vec::new();
        for y in 0..n {
            let py = center(y) + dy;
            hits.clear();
            for [a, b, c] in &tris {
                if let Some(x) = line_x_hit(a, b, c, py, pz) {
                    hits.push(x);
                }
            }
            hits.sort_by(f64::total_cmp);
            for x in 0..n {
                let px = center(x);
                let crossings = hits.len() - hits.partition_point(|&hx| hx <= px);
                out[y * n + x] = crossings % 2 == 1;
            }
        }
        out
    });
    Ok(OccupancyGrid {
        resolution: n,
        bits: slabs.concat(),
        watertight: mesh.is_watertight(),
    })
}

/// x-coordinate where the line `{(·, y, z)}` crosses triangle `abc`.
fn line_x_hit(a: &Point, b: &Point, c: &Point, y: f64, z: f64) -> Option<f64> {
    let d = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2]);
    if d.abs() < 1e-300 {
        return None;
    }
    let u = ((y - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (z - a[2])) / d;
    let v = ((b[1] - a[1]) * (z - a[2]) - (y - a[1]) * (b[2] - a[2])) / d;
    if u < 0.0 || v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]))
}

/// `|a ∧ b| / |a ∨ b|`, zero when both are empty.
pub fn volumetric_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    if a.resolution != b.resolution || a.bits.len() != b.bits.len() {
        return Err(Error::Shape {
            op: "volumetric_iou",
            lhs: vec![a.resolution; 3],
            rhs: vec![b.resolution; 3],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapeScores {
    pub chamfer: f64,
    pub iou: f64,
    pub watertight: bool,
}

/// Chamfer distance and volumetric IoU after normalizing both meshes to the
/// unit cube.
pub fn compare_meshes<R: Rng + ?Sized>(
    pred: &TriMesh,
    gt: &TriMesh,
    rng: &mut R,
) -> Result<ShapeScores> {
    let (p, g) = (normalize_mesh(pred)?, normalize_mesh(gt)?);
    let pa = sample_points(&p, SAMPLE_POINTS, rng)?;
    let pb = sample_points(&g, SAMPLE_POINTS, rng)?;
    let (vp, vg) = (voxelize(&p, IOU_RESOLUTION)?, voxelize(&g, IOU_RESOLUTION)?);
    Ok(ShapeScores {
        chamfer: chamfer(&pa, &pb)?,
        iou: volumetric_iou(&vp, &vg)?,
        watertight: vp.watertight && vg.watertight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshing::{marching_cubes, DensityVolume};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn noisy(img: &Image, sigma: f32, rng: &mut ChaCha8Rng) -> Image {
        let noise = crate::diffusion::standard_normal(rng, img.len());
        Image::from_pixels(
            img.width,
            img.height,
            img.pixels
                .iter()
                .zip(noise)
                .map(|(p, n)| p + sigma * n)
                .collect(),
        )
        .unwrap()
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_pixels(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn psnr_identities() {
        let a = Image::filled(8, 8, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(8, 8, [0.4, 0.6, 0.8]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &Image::white(4, 4)).is_err());
    }

    #[test]
    fn psnr_matches_scalar_reference() {
        let (a, b) = (random_image(9, 7, 1), random_image(9, 7, 2));
        let mut s = 0.0;
        for y in 0..7 {
            for x in 0..9 {
                let (p, q) = (a.get(x, y), b.get(x, y));
                for c in 0..3 {
                    s += (p[c] as f64 - q[c] as f64).powi(2);
                }
            }
        }
        let reference = 10.0 * (1.0 / (s / 189.0)).log10();
        assert!((psnr(&a, &b).unwrap() - reference).abs() < 1e-6);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = random_image(16, 16, 3);
        let mut means = Vec::new();
        for sigma in [0.01f32, 0.05, 0.1] {
            let mut total = 0.0;
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                total += psnr(&base, &noisy(&base, sigma, &mut rng)).unwrap();
            }
            means.push(total / 10.0);
        }
        assert!(means[0] > means[1] && means[1] > means[2]);
    }

    #[test]
    fn ssim_identities() {
        let a = random_image(16, 14, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random_image(16, 14, 5);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ssim(&Image::white(10, 10), &Image::white(10, 10)).is_err());
    }

    #[test]
    fn ssim_of_constants() {
        let (p, q) = (0.2f64, 0.7f64);
        let a = Image::filled(12, 12, [p as f32; 3]);
        let b = Image::filled(12, 12, [q as f32; 3]);
        let (p, q) = (p as f32 as f64, q as f32 as f64);
        let c1 = 0.01f64.powi(2);
        let expect = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    fn sphere_mesh(m: usize) -> TriMesh {
        marching_cubes(
            &DensityVolume::from_fn(m, |p| {
                0.4 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
            }),
            0.0,
        )
    }

    #[test]
    fn normalization() {
        let mesh = sphere_mesh(32);
        let n1 = normalize_mesh(&mesh).unwrap();
        let (lo, hi) = n1.bounds().unwrap();
        let longest = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        assert!((longest - 1.0).abs() < 1e-12);
        let n2 = normalize_mesh(&n1).unwrap();
        for (a, b) in n1.vertices.iter().zip(&n2.vertices) {
            assert!(dist2(a, b).sqrt() < 1e-9);
        }
        let scaled: Vec<Point> = mesh
            .vertices
            .iter()
            .map(|p| p.map(|c| 2.0 * c + 0.25))
            .collect();
        let ns = normalize_points(&scaled).unwrap();
        for (a, b) in n1.vertices.iter().zip(&ns) {
            assert!(dist2(a, b).sqrt() < 1e-12);
        }
        assert!(normalize_points(&[[1.0, 2.0, 3.0]; 4]).is_err());
    }

    #[test]
    fn sampling_is_area_uniform() {
        let square = TriMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
                [5.0, 5.0, 5.0],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3], [4, 4, 4]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = sample_points(&square, 100_000, &mut rng).unwrap();
        let mut q = [0usize; 4];
        for p in &pts {
            assert!(p[2] == 0.0 && p[0] <= 1.0 && p[1] <= 1.0);
            q[(p[0] >= 0.5) as usize + 2 * (p[1] >= 0.5) as usize] += 1;
        }
        for c in q {
            assert!((c as f64 / 25_000.0 - 1.0).abs() < 0.02, "{q:?}");
        }
        assert_eq!(sample_points(&square, 2000, &mut rng).unwrap().len(), 2000);
        assert!(sample_points(&TriMesh::default(), 10, &mut rng).is_err());
    }

    #[test]
    fn chamfer_identities() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[0.3, 0.0, 0.0]];
        assert!((chamfer(&a, &b).unwrap() - 0.3).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c: Vec<Point> = (0..50)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        assert_eq!(chamfer(&c, &c).unwrap(), 0.0);
        assert!(chamfer(&c, &[]).is_err());
    }

    #[test]
    fn accelerated_chamfer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let spread = 0.1 + trial as f64 * 0.3;
            let a: Vec<Point> = (0..200)
                .map(|_| [0, 1, 2].map(|_| rng.random_range(-spread..spread)))
                .collect();
            let b: Vec<Point> = (0..200)
                .map(|_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5)))
                .collect();
            let fast = chamfer(&a, &b).unwrap();
            let slow = chamfer_brute(&a, &b).unwrap();
            assert_eq!(fast.to_bits(), slow.to_bits());
            assert_eq!(fast, chamfer(&b, &a).unwrap());
        }
    }

    #[test]
    fn iou_identities() {
        let mk = |f: fn(usize) -> bool| OccupancyGrid {
            resolution: 4,
            bits: (0..64).map(f).collect(),
            watertight: true,
        };
        let a = mk(|i| i < 20);
        assert_eq!(volumetric_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(volumetric_iou(&a, &mk(|i| i >= 40)).unwrap(), 0.0);
        assert_eq!(volumetric_iou(&mk(|_| false), &mk(|_| false)).unwrap(), 0.0);
        assert!((volumetric_iou(&a, &mk(|i| i < 10)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn voxelized_sphere_fraction() {
        let mesh = normalize_mesh(&sphere_mesh(64)).unwrap();
        let occ = voxelize(&mesh, 64).unwrap();
        assert!(occ.watertight);
        assert!(
            (occ.fraction() / (PI / 6.0) - 1.0).abs() < 0.03,
            "{}",
            occ.fraction()
        );
    }
}
