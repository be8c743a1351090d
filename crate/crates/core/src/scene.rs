//! Procedural objects, an SDF sphere tracer, and the multi-view dataset.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{
    encode_pose, ray_for_pixel, relative_pose, sample_training_cameras, spherical_to_extrinsics,
    CameraExtrinsics, PinholeIntrinsics, PoseEncoding, SphericalPose,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::parallel;

pub const MAX_STEPS: usize = 128;
pub const HIT_EPS: f64 = 1e-4;
pub const FAR_PLANE: f64 = 6.0;
pub const AMBIENT: f64 = 0.2;
pub const DEFAULT_VIEWS: usize = 12;

type V3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    Box {
        half: [f64; 3],
    },
    /// Ring in the xy-plane around the z axis.
    Torus {
        major: f64,
        minor: f64,
    },
    /// Capped cylinder along the z axis.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
}

impl Shape {
    fn sdf(&self, p: &V3) -> f64 {
        match *self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half } => {
                let q = p.abs() - V3::from(half);
                q.sup(&V3::zeros()).norm() + q.max().min(0.0)
            }
            Shape::Torus { major, minor } => {
                let qx = (p.x * p.x + p.y * p.y).sqrt() - major;
                (qx * qx + p.z * p.z).sqrt() - minor
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let dx = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                dx.max(dz).min(0.0) + (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt()
            }
        }
    }

    fn half_extent(&self) -> V3 {
        match *self {
            Shape::Sphere { radius } => V3::repeat(radius),
            Shape::Box { half } => V3::from(half),
            Shape::Torus { major, minor } => V3::new(major + minor, major + minor, minor),
            Shape::Cylinder {
                radius,
                half_height,
            } => V3::new(radius, radius, half_height),
        }
    }

    fn scaled(&self, s: f64) -> Shape {
        match *self {
            Shape::Sphere { radius } => Shape::Sphere { radius: radius * s },
            Shape::Box { half } => Shape::Box {
                half: half.map(|h| h * s),
            },
            Shape::Torus { major, minor } => Shape::Torus {
                major: major * s,
                minor: minor * s,
            },
            Shape::Cylinder {
                radius,
                half_height,
            } => Shape::Cylinder {
                radius: radius * s,
                half_height: half_height * s,
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
            Shape::Torus { .. } => "torus",
            Shape::Cylinder { .. } => "cylinder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn sdf(&self, p: &V3) -> f64 {
        self.shape.sdf(&(p - V3::from(self.center)))
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (V3, V3) {
        let c = V3::from(self.center);
        let h = self.shape.half_extent();
        (c - h, c + h)
    }
}

/// A small union of SDF primitives living in `[-0.5, 0.5]³`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl SceneObject {
    pub fn single(shape: Shape, albedo: [f64; 3]) -> Self {
        Self {
            primitives: vec![Primitive {
                shape,
                center: [0.0; 3],
                albedo,
            }],
            seed: 0,
        }
    }

    /// Distance to the union and the index of the closest primitive.
    pub fn sdf(&self, p: &V3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.primitives.iter().enumerate() {
            let d = prim.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn bounds(&self) -> Option<(V3, V3)> {
        let mut it = self.primitives.iter().map(Primitive::bounds);
        let first = it.next()?;
        Some(it.fold(first, |(lo, hi), (a, b)| (lo.inf(&a), hi.sup(&b))))
    }

    /// Centers the bounding box on the origin and scales the longest side to 1.
    pub fn normalized(mut self) -> Self {
        if let Some((lo, hi)) = self.bounds() {
            let center = (lo + hi) * 0.5;
            let extent = (hi - lo).max();
            if extent > 0.0 {
                let s = 1.0 / extent;
                for p in &mut self.primitives {
                    p.center = ((V3::from(p.center) - center) * s).into();
                    p.shape = p.shape.scaled(s);
                }
            }
        }
        self
    }

    fn normal(&self, p: &V3) -> V3 {
        let e = 1e-5;
        let d = |q: V3| self.sdf(&q).0;
        let n = V3::new(
            d(p + V3::x() * e) - d(p - V3::x() * e),
            d(p + V3::y() * e) - d(p - V3::y() * e),
            d(p + V3::z() * e) - d(p - V3::z() * e),
        );
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            V3::z()
        }
    }
}

/// Procedurally generates a 1–4 primitive object, deterministic in `seed`.
pub fn generate_object(seed: u64) -> SceneObject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=4usize);
    let primitives = (0..count)
        .map(|_| {
            let size = |rng: &mut ChaCha8Rng| rng.random_range(0.12..0.35);
            let shape = match rng.random_range(0..4u32) {
                0 => Shape::Sphere {
                    radius: size(&mut rng),
                },
                1 => Shape::Box {
                    half: [size(&mut rng), size(&mut rng), size(&mut rng)],
                },
                2 => {
                    let major = size(&mut rng);
                    Shape::Torus {
                        major,
                        minor: major * rng.random_range(0.25..0.5),
                    }
                }
                _ => Shape::Cylinder {
                    radius: size(&mut rng),
                    half_height: size(&mut rng),
                },
            };
            let center = [(); 3].map(|_| rng.random_range(-0.3..0.3));
            let albedo = [(); 3].map(|_| rng.random_range(0.1..0.9));
            Primitive {
                shape,
                center,
                albedo,
            }
        })
        .collect();
    SceneObject { primitives, seed }.normalized()
}

/// Directional light; `direction` points from the surface toward the light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalLight {
    pub direction: V3,
}

impl DirectionalLight {
    pub fn new(direction: V3) -> Self {
        Self {
            direction: direction.normalize(),
        }
    }

    /// Random direction on the upper hemisphere.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let z: f64 = rng.random_range(0.2..1.0);
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let s = (1.0 - z * z).sqrt();
        Self::new(V3::new(s * a.cos(), s * a.sin(), z))
    }
}

impl Default for DirectionalLight {
    fn default() -> Self {
        Self::new(V3::new(0.3, 0.4, 0.866))
    }
}

/// Sphere-traces one ray and shades the hit. `None` for a miss.
pub fn trace(
    obj: &SceneObject,
    origin: &V3,
    dir: &V3,
    light: &DirectionalLight,
) -> Option<[f64; 3]> {
    if obj.primitives.is_empty() {
        return None;
    }
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        let p = origin + dir * t;
        let (d, idx) = obj.sdf(&p);
        if d < HIT_EPS {
            let n = obj.normal(&p);
            let lambert = n.dot(&light.direction).max(0.0);
            let k = AMBIENT + (1.0 - AMBIENT) * lambert;
            let a = obj.primitives[idx].albedo;
            return Some(a.map(|c| (c * k).clamp(0.0, 1.0)));
        }
        t += d;
        if t > FAR_PLANE {
            return None;
        }
    }
    None
}

/// Renders `obj` with white background at pixel centers.
pub fn render_view(
    obj: &SceneObject,
    extr: &CameraExtrinsics,
    intr: &PinholeIntrinsics,
    light: &DirectionalLight,
) -> Image {
    let (w, h) = (intr.width, intr.height);
    let rows = parallel::map_indexed(h, |y| {
        let mut row = Vec::with_capacity(w * 3);
        for x in 0..w {
            let (o, d) = ray_for_pixel(extr, intr, (x, y), (0.5, 0.5));
            let rgb = trace(obj, &o, &d, light).unwrap_or([1.0; 3]);
            row.extend(rgb.map(|v| v as f32));
        }
        row
    });
    Image::from_pixels(w, h, rows.concat()).expect("row sizes")
}

pub fn render_pose(
    obj: &SceneObject,
    pose: &SphericalPose,
    res: usize,
    light: &DirectionalLight,
) -> Image {
    render_view(
        obj,
        &spherical_to_extrinsics(pose),
        &PinholeIntrinsics::square(res),
        light,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub pose: SphericalPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectViews {
    pub id: String,
    pub seed: u64,
    pub light: [f64; 3],
    pub views: Vec<View>,
}

impl ObjectViews {
    pub fn object(&self) -> SceneObject {
        generate_object(self.seed)
    }

    pub fn light(&self) -> DirectionalLight {
        DirectionalLight::new(V3::from(self.light))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewDataset {
    pub objects: Vec<ObjectViews>,
    pub views_per_object: usize,
    pub resolution: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewMeta {
    theta: f64,
    phi: f64,
    radius: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectMeta {
    seed: u64,
    resolution: usize,
    light: [f64; 3],
    views: Vec<ViewMeta>,
}

pub fn object_id(index: usize) -> String {
    format!("obj_{index:04}")
}

/// Renders `views_per_object` random views of `num_objects` generated objects.
pub fn build_dataset<R: Rng + ?Sized>(
    num_objects: usize,
    views_per_object: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<ViewDataset> {
    if num_objects == 0 || views_per_object < 2 || resolution == 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs ≥1 object, ≥2 views, positive resolution (got {num_objects}, {views_per_object}, {resolution})"
        )));
    }
    let objects = (0..num_objects)
        .map(|k| {
            let seed: u64 = rng.random();
            let light = DirectionalLight::random(rng);
            let poses = sample_training_cameras(rng, views_per_object);
            let obj = generate_object(seed);
            let views = poses
                .into_iter()
                .map(|pose| View {
                    image: render_pose(&obj, &pose, resolution, &light),
                    pose,
                })
                .collect();
            ObjectViews {
                id: object_id(k),
                seed,
                light: light.direction.into(),
                views,
            }
        })
        .collect();
    Ok(ViewDataset {
        objects,
        views_per_object,
        resolution,
    })
}

impl ViewDataset {
    /// Writes `<root>/<id>/view_<k>.ppm` and `<root>/<id>/meta.json`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for obj in &self.objects {
            let dir = root.join(&obj.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (k, v) in obj.views.iter().enumerate() {
                v.image.write_ppm(&dir.join(format!("view_{k}.ppm")))?;
            }
            let meta = ObjectMeta {
                seed: obj.seed,
                resolution: self.resolution,
                light: obj.light,
                views: obj
                    .views
                    .iter()
                    .map(|v| ViewMeta {
                        theta: v.pose.theta,
                        phi: v.pose.phi,
                        radius: v.pose.radius,
                    })
                    .collect(),
            };
            let path = dir.join("meta.json");
            let text = serde_json::to_string_pretty(&meta).expect("serializable");
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("meta.json").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::format(root, "no object directories with meta.json"));
        }
        let mut objects = Vec::with_capacity(dirs.len());
        let mut views_per_object = None;
        let mut resolution = None;
        for dir in dirs {
            let path = dir.join("meta.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let meta: ObjectMeta =
                serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
            if *views_per_object.get_or_insert(meta.views.len()) != meta.views.len() {
                return Err(Error::format(&path, "inconsistent view count"));
            }
            if *resolution.get_or_insert(meta.resolution) != meta.resolution {
                return Err(Error::format(&path, "inconsistent resolution"));
            }
            let views = meta
                .views
                .iter()
                .enumerate()
                .map(|(k, vm)| {
                    let image = Image::read_ppm(&dir.join(format!("view_{k}.ppm")))?;
                    if image.width != meta.resolution || image.height != meta.resolution {
                        return Err(Error::format(&path, format!("view {k} has wrong size")));
                    }
                    let pose = SphericalPose::new(vm.theta, vm.phi, vm.radius)
                        .map_err(|e| Error::format(&path, e.to_string()))?;
                    Ok(View { image, pose })
                })
                .collect::<Result<Vec<_>>>()?;
            objects.push(ObjectViews {
                id: dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                seed: meta.seed,
                light: meta.light,
                views,
            });
        }
        Ok(ViewDataset {
            objects,
            views_per_object: views_per_object.unwrap_or(0),
            resolution: resolution.unwrap_or(0),
        })
    }
}

/// One training example `(x, x_target, encode(relative(pose_x, pose_target)))`.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub input: Image,
    pub target: Image,
    pub encoding: PoseEncoding,
}

/// Draws an ordered pair of distinct views of a uniformly chosen object.
pub fn sample_pair<R: Rng + ?Sized>(dataset: &ViewDataset, rng: &mut R) -> TrainingPair {
    let obj = dataset
        .objects
        .choose(rng)
        .expect("dataset must be non-empty");
    let (i, j) = sample_view_indices(obj.views.len(), rng);
    let (a, b) = (&obj.views[i], &obj.views[j]);
    TrainingPair {
        input: a.image.clone(),
        target: b.image.clone(),
        encoding: encode_pose(&relative_pose(&a.pose, &b.pose)),
    }
}

/// Uniform ordered pair `(i, j)` with `i != j`.
pub fn sample_view_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    assert!(n >= 2, "need at least two views");
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::RelativePose;
    use std::collections::HashSet;
    use std::f64::consts::PI;

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_object(0), generate_object(0));
        assert_ne!(generate_object(0), generate_object(1));
    }

    #[test]
    fn objects_fit_unit_cube() {
        for seed in 0..1000 {
            let obj = generate_object(seed);
            assert!((1..=4).contains(&obj.primitives.len()));
            let (lo, hi) = obj.bounds().unwrap();
            for k in 0..3 {
                assert!(lo[k] >= -0.5 - 1e-9 && hi[k] <= 0.5 + 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn all_shapes_appear() {
        let mut seen = HashSet::new();
        for seed in 0..100 {
            for p in generate_object(seed).primitives {
                seen.insert(p.shape.name());
            }
        }
        assert_eq!(seen.len(), 4, "{seen:?}");
    }

    #[test]
    fn empty_object_renders_white() {
        let obj = SceneObject {
            primitives: vec![],
            seed: 0,
        };
        let pose = SphericalPose::new(1.0, 0.3, 2.0).unwrap();
        let img = render_pose(&obj, &pose, 16, &DirectionalLight::default());
        assert!(img.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn head_on_light_gives_albedo() {
        let albedo = [0.6, 0.3, 0.9];
        let obj = SceneObject::single(Shape::Sphere { radius: 0.4 }, albedo);
        let pose = SphericalPose::new(PI / 2.0, 0.0, 2.0).unwrap();
        // surface normal at the principal pixel is +x; light comes from +x
        let light = DirectionalLight::new(V3::x());
        let img = render_pose(&obj, &pose, 33, &light);
        let c = img.get(16, 16);
        for k in 0..3 {
            assert!((c[k] as f64 - albedo[k]).abs() < 1e-3, "{c:?}");
        }
    }

    #[test]
    fn occluded_sphere_contributes_nothing() {
        let box_only = SceneObject::single(
            Shape::Box {
                half: [0.3, 0.3, 0.3],
            },
            [0.5, 0.5, 0.5],
        );
        let mut with_sphere = box_only.clone();
        with_sphere.primitives.push(Primitive {
            shape: Shape::Sphere { radius: 0.05 },
            center: [-0.4, 0.0, 0.0],
            albedo: [1.0, 0.0, 0.0],
        });
        let pose = SphericalPose::new(PI / 2.0, 0.0, 2.0).unwrap();
        let light = DirectionalLight::default();
        let a = render_pose(&box_only, &pose, 32, &light);
        let b = render_pose(&with_sphere, &pose, 32, &light);
        assert_eq!(a, b);
    }

    #[test]
    fn quarter_turn_symmetry() {
        let obj = SceneObject::single(
            Shape::Box {
                half: [0.3, 0.3, 0.2],
            },
            [0.4, 0.7, 0.2],
        );
        let pose = SphericalPose::new(1.1, 0.4, 2.0).unwrap();
        let turned = pose.offset(&RelativePose::new(0.0, PI / 2.0, 0.0)).unwrap();
        let l = V3::new(0.2, 0.5, 0.8);
        let rot = nalgebra::Rotation3::from_axis_angle(&V3::z_axis(), PI / 2.0);
        let a = render_pose(&obj, &pose, 24, &DirectionalLight::new(l));
        let b = render_pose(&obj, &turned, 24, &DirectionalLight::new(rot * l));
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn pair_indices_distinct_and_cover_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = HashSet::new();
        for _ in 0..20_000 {
            let (i, j) = sample_view_indices(12, &mut rng);
            assert_ne!(i, j);
            seen.insert((i, j));
        }
        assert_eq!(seen.len(), 132);
    }
}
