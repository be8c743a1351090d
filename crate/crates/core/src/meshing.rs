//! Density-grid meshing: lattice query, box mean filter, grayscale erosion
//! and marching cubes.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc_tables::TRI_TABLE;
use crate::parallel;
use crate::scene::SceneObject;
use crate::voxelfield::{trilinear_sample, VoxelGrid, BOUND};

pub const DEFAULT_MESH_RES: usize = 64;
pub const MEAN_FILTER_SIZE: [usize; 3] = [7, 7, 7];
pub const ERODE_SIZE: [usize; 3] = [5, 5, 5];
/// Threshold multiple for clean single objects.
pub const THRESHOLD_SINGLE: f64 = 8.0;
/// Threshold multiple for cluttered scenes.
pub const THRESHOLD_CLUTTERED: f64 = 4.0;

/// Scalar samples on an `M³` lattice of cell centers over the grid bounds,
/// stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume {
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl DensityVolume {
    pub fn new(resolution: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != resolution.pow(3) {
            return Err(Error::Shape {
                op: "density_volume",
                lhs: vec![resolution; 3],
                rhs: vec![values.len()],
            });
        }
        Ok(Self { resolution, values })
    }

    /// Samples `f` at every lattice point.
    pub fn from_fn(resolution: usize, f: impl Fn([f64; 3]) -> f64 + Sync) -> Self {
        let m = resolution;
        let slabs = parallel::map_indexed(m, |z| {
            let mut out = Vec::with_capacity(m * m);
            for y in 0..m {
                for x in 0..m {
                    out.push(f(lattice_point(m, [x, y, z])));
                }
            }
            out
        });
        Self {
            resolution: m,
            values: slabs.concat(),
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// World position of lattice point `i` in an `m³` lattice.
pub fn lattice_point(m: usize, i: [usize; 3]) -> [f64; 3] {
    let h = 2.0 * BOUND / m as f64;
    i.map(|k| -BOUND + (k as f64 + 0.5) * h)
}

/// Activated density of `grid` on an `m³` lattice.
pub fn query_density(grid: &VoxelGrid, m: usize) -> Result<DensityVolume> {
    if m < 8 {
        return Err(Error::InvalidArgument(format!(
            "mesh resolution {m} must be ≥ 8"
        )));
    }
    Ok(DensityVolume::from_fn(m, |p| trilinear_sample(grid, p).0))
}

fn check_kernel(size: [usize; 3]) -> Result<()> {
    if size.iter().any(|&s| s % 2 == 0) {
        return Err(Error::InvalidArgument(format!(
            "kernel size {size:?} must be odd"
        )));
    }
    Ok(())
}

/// Applies a 1-D window reduction along `axis` over in-bounds neighbors.
fn sweep(
    vol: &DensityVolume,
    axis: usize,
    radius: usize,
    reduce: impl Fn(&[f64]) -> f64 + Sync,
) -> Vec<f64> {
    let m = vol.resolution;
    let stride = [1, m, m * m][axis];
    let slabs = parallel::map_indexed(m, |z| {
        let mut out = Vec::with_capacity(m * m);
        let mut window = Vec::with_capacity(2 * radius + 1);
        for y in 0..m {
            for x in 0..m {
                let p = [x, y, z];
                let c = p[axis];
                let base = vol.index(x, y, z) - c * stride;
                window.clear();
                for k in c.saturating_sub(radius)..(c + radius + 1).min(m) {
                    window.push(vol.values[base + k * stride]);
                }
                out.push(reduce(&window));
            }
        }
        out
    });
    slabs.concat()
}

/// Box mean with zero padding outside the volume.
pub fn mean_filter(vol: &DensityVolume, size: [usize; 3]) -> Result<DensityVolume> {
    check_kernel(size)?;
    let mut cur = vol.clone();
    for axis in 0..3 {
        let k = size[axis] as f64;
        cur.values = sweep(&cur, axis, size[axis] / 2, |w| w.iter().sum::<f64>() / k);
    }
    Ok(cur)
}

/// Grayscale erosion: minimum over the in-bounds part of the neighborhood.
pub fn erode(vol: &DensityVolume, size: [usize; 3]) -> Result<DensityVolume> {
    check_kernel(size)?;
    let mut cur = vol.clone();
    for axis in 0..3 {
        cur.values = sweep(&cur, axis, size[axis] / 2, |w| {
            w.iter().copied().fold(f64::INFINITY, f64::min)
        });
    }
    Ok(cur)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume (positive for outward-facing triangles).
    pub fn volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                let k = cross(b, c);
                (a[0] * k[0] + a[1] * k[1] + a[2] * k[2]) / 6.0
            })
            .sum()
    }

    /// `V − E + F`, counting only referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut verts = HashSet::new();
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                verts.insert(a);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        verts.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(usize, usize), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !count.is_empty() && count.values().all(|&c| c == 2)
    }

    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }

    /// ASCII OBJ with 1-based face indices.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn parse_obj(text: &str) -> std::result::Result<Self, String> {
        let mut mesh = TriMesh::default();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| {
                            s.parse::<f64>()
                                .map_err(|e| format!("line {}: {e}", ln + 1))
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    if c.len() != 3 {
                        return Err(format!("line {}: vertex needs 3 coordinates", ln + 1));
                    }
                    mesh.vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|s| {
                            // accept `i`, `i/t` and `i/t/n`
                            s.split('/')
                                .next()
                                .unwrap_or("")
                                .parse::<usize>()
                                .map_err(|e| format!("line {}: {e}", ln + 1))
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    if idx.len() < 3 || idx.contains(&0) {
                        return Err(format!("line {}: bad face", ln + 1));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.triangles
                            .push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                    }
                }
                _ => {}
            }
        }
        let n = mesh.vertices.len();
        if mesh.triangles.iter().flatten().any(|&i| i >= n) {
            return Err("face index out of range".into());
        }
        Ok(mesh)
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text).map_err(|r| Error::format(path, r))
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Triangulates the `iso` level set of `vol`; the region `value ≥ iso` is
/// inside and triangles face outward. Vertices on shared cube edges are
/// shared, so closed level sets give closed meshes.
pub fn marching_cubes(vol: &DensityVolume, iso: f64) -> TriMesh {
    let h = 2.0 * BOUND / vol.resolution as f64;
    marching_cubes_on(vol, iso, [-BOUND + 0.5 * h; 3], h)
}

/// Marching cubes on a lattice whose point `i` sits at `origin + i·spacing`.
pub fn marching_cubes_on(vol: &DensityVolume, iso: f64, origin: [f64; 3], spacing: f64) -> TriMesh {
    let m = vol.resolution;
    let mut mesh = TriMesh::default();
    if m < 2 {
        return mesh;
    }
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for z in 0..m - 1 {
        for y in 0..m - 1 {
            for x in 0..m - 1 {
                let mut case = 0usize;
                let mut vals = [0.0; 8];
                for (k, c) in CORNERS.iter().enumerate() {
                    vals[k] = vol.values[vol.index(x + c[0], y + c[1], z + c[2])];
                    if vals[k] < iso {
                        case |= 1 << k;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0usize; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let (a, b) = EDGES[e as usize];
                        let (pa, pb) = (CORNERS[a], CORNERS[b]);
                        let (lo, hi, vlo, vhi) = if pa < pb {
                            (pa, pb, vals[a], vals[b])
                        } else {
                            (pb, pa, vals[b], vals[a])
                        };
                        let axis = (0..3)
                            .find(|&i| lo[i] != hi[i])
                            .expect("edge along one axis");
                        let li = [x + lo[0], y + lo[1], z + lo[2]];
                        let key = (vol.index(li[0], li[1], li[2]), axis);
                        ids[slot] = *edge_vertex.entry(key).or_insert_with(|| {
                            let t = if vhi == vlo {
                                0.5
                            } else {
                                ((iso - vlo) / (vhi - vlo)).clamp(0.0, 1.0)
                            };
                            let mut p = [0, 1, 2].map(|a| origin[a] + li[a] as f64 * spacing);
                            p[axis] += t * spacing;
                            mesh.vertices.push(p);
                            mesh.vertices.len() - 1
                        });
                    }
                    let t = ids;
                    if t[0] != t[1]
                        && t[1] != t[2]
                        && t[0] != t[2]
                        && mesh.triangle_area(&t) > 1e-18
                    {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    mesh
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSettings {
    pub resolution: usize,
    pub threshold_multiple: f64,
    pub mean_filter: [usize; 3],
    pub erode: [usize; 3],
}

impl Default for ExtractSettings {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_MESH_RES,
            threshold_multiple: THRESHOLD_SINGLE,
            mean_filter: MEAN_FILTER_SIZE,
            erode: ERODE_SIZE,
        }
    }
}

/// Query, mean filter, erode, then marching cubes at
/// `threshold_multiple × mean(processed volume)`.
pub fn extract_from_volume(vol: &DensityVolume, s: &ExtractSettings) -> Result<TriMesh> {
    if !(s.threshold_multiple > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold multiple {} must be positive",
            s.threshold_multiple
        )));
    }
    if vol.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite(
            "density volume has negative or non-finite values".into(),
        ));
    }
    let filtered = erode(&mean_filter(vol, s.mean_filter)?, s.erode)?;
    let iso = s.threshold_multiple * filtered.mean();
    if !(iso > 0.0) || filtered.max() < iso {
        return Err(Error::EmptyMesh);
    }
    let mesh = marching_cubes(&filtered, iso);
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Ok(mesh)
}

/// Surface mesh of a procedural object, contoured from its signed distance
/// on an `m³` lattice padded around the object's bounds.
pub fn mesh_sdf(obj: &SceneObject, m: usize) -> Result<TriMesh> {
    let (lo, hi) = obj.bounds().ok_or(Error::EmptyMesh)?;
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let spacing = extent / (m as f64 - 5.0);
    let origin = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]) - 0.5 * (m - 1) as f64 * spacing);
    let mut values = Vec::with_capacity(m * m * m);
    for z in 0..m {
        for y in 0..m {
            for x in 0..m {
                let p = [x, y, z].map(|i| i as f64);
                let w = Vector3::new(
                    origin[0] + p[0] * spacing,
                    origin[1] + p[1] * spacing,
                    origin[2] + p[2] * spacing,
                );
                values.push(-obj.sdf(&w).0);
            }
        }
    }
    let mesh = marching_cubes_on(&DensityVolume::new(m, values)?, 0.0, origin, spacing);
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Ok(mesh)
}

pub fn extract_mesh(grid: &VoxelGrid, s: &ExtractSettings) -> Result<TriMesh> {
    extract_from_volume(&query_density(grid, s.resolution)?, s)
}
