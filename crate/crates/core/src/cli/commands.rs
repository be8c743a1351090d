use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checks::gradcheck_suite;
use super::config::{load_config, log_config, set};
use super::{
    DatasetArgs, DistillArgs, EvaluateArgs, ExtractMeshArgs, GradcheckArgs, OracleReconArgs,
    PoseArgs, ReconstructArgs, SynthesizeArgs, TrainArgs,
};
use crate::autograd::Checkpoint;
use crate::camera::{RelativePose, SphericalPose};
use crate::denoiser::{Denoiser, NoisePredictor};
use crate::diffusion::{
    smoothed_loss, synthesize as synthesize_view, train_denoiser, GuidanceConfig, NoiseSchedule,
    TrainConfig, NVS_GUIDANCE,
};
use crate::distill::{
    guidance_for_distillation, reconstruct as distill, DistillConfig, IterLog, ScoreModel,
    LOG_HEADER,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::meshing::{extract_mesh as extract, mesh_sdf, ExtractSettings, TriMesh};
use crate::metrics::{compare_meshes, psnr, ssim, IOU_RESOLUTION, SAMPLE_POINTS};
use crate::scene::{
    build_dataset, generate_object, render_pose, DirectionalLight, SceneObject, Shape, ViewDataset,
};
use crate::voxelfield::VoxelGrid;

type Rng = ChaCha8Rng;

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub objects: usize,
    pub views: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            objects: 8,
            views: 12,
            resolution: 32,
            seed: 0,
        }
    }
}

pub(super) fn dataset(a: DatasetArgs) -> Result<()> {
    let mut cfg: DatasetConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.objects, a.objects);
    set(&mut cfg.views, a.views);
    set(&mut cfg.resolution, a.res);
    set(&mut cfg.seed, a.common.seed);
    log_config("dataset", &cfg);
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let ds = build_dataset(cfg.objects, cfg.views, cfg.resolution, &mut rng)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    ds.save(&a.out)?;
    eprintln!(
        "wrote {} views of {} objects to {}",
        cfg.objects * cfg.views,
        cfg.objects,
        a.out.display()
    );
    Ok(())
}

pub(super) fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.steps, a.steps);
    set(&mut cfg.batch_size, a.batch);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.groups, a.groups);
    set(&mut cfg.log_every, a.log_every);
    set(&mut cfg.seed, a.common.seed);
    if let Some(w) = a.widths {
        cfg.widths = w.try_into().map_err(|w: Vec<usize>| {
            Error::Config(format!("--widths takes three values, got {w:?}"))
        })?;
    }
    let ds = ViewDataset::load(&a.data)?;
    cfg.resolution = ds.resolution;
    log_config("train", &cfg);
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let every = cfg.log_every.max(1);
    let mut seen = Vec::new();
    let (model, losses) = train_denoiser(&ds, &cfg, &mut rng, |step, loss| {
        seen.push(loss);
        if step % every == 0 || step == 1 {
            eprintln!(
                "step {step} loss {loss:.6} smoothed {:.6}",
                smoothed_loss(&seen, step, every)
            );
        }
    })?;
    create_parent(&a.out)?;
    model.checkpoint().save(&a.out)?;
    if let Some(path) = &a.loss_log {
        let mut text = String::from("step, loss\n");
        for (i, l) in losses.iter().enumerate() {
            writeln!(text, "{}, {l:.9e}", i + 1).expect("string write");
        }
        write_text(path, &text)?;
    }
    eprintln!(
        "saved {} ({} parameters)",
        a.out.display(),
        model.param_count()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Denoiser> {
    Denoiser::from_checkpoint(&Checkpoint::load(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesizeConfig {
    pub dtheta: f64,
    pub dphi: f64,
    pub dr: f64,
    pub guidance: f64,
    /// `None` runs the full ancestral chain.
    pub sample_steps: Option<usize>,
    pub seed: u64,
}

impl Default for SynthesizeConfig {
    fn default() -> Self {
        Self {
            dtheta: 0.0,
            dphi: 0.0,
            dr: 0.0,
            guidance: NVS_GUIDANCE,
            sample_steps: None,
            seed: 0,
        }
    }
}

pub(super) fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let mut cfg: SynthesizeConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.dtheta, a.dtheta);
    set(&mut cfg.dphi, a.dphi);
    set(&mut cfg.dr, a.dr);
    set(&mut cfg.guidance, a.guidance);
    set(&mut cfg.seed, a.common.seed);
    if a.sample_steps.is_some() {
        cfg.sample_steps = a.sample_steps;
    }
    log_config("synthesize", &cfg);
    GuidanceConfig {
        scale: cfg.guidance,
        ..Default::default()
    }
    .validate()?;
    let model = load_model(&a.ckpt)?;
    let x = Image::read_ppm(&a.input)?;
    let sched = NoiseSchedule::linear(model.config.steps)?;
    let rel = RelativePose::new(cfg.dtheta, cfg.dphi, cfg.dr);
    let steps = cfg.sample_steps.unwrap_or(sched.steps());
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let out = synthesize_view(&model, &x, &rel, cfg.guidance, &sched, &mut rng, steps)?;
    create_parent(&a.out)?;
    out.write_ppm(&a.out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseConfig {
    pub theta: f64,
    pub phi: f64,
    pub radius: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            theta: 1.2,
            phi: 0.4,
            radius: 2.0,
        }
    }
}

impl PoseConfig {
    fn apply(&mut self, a: &PoseArgs) {
        set(&mut self.theta, a.theta);
        set(&mut self.phi, a.phi);
        set(&mut self.radius, a.radius);
    }

    pub fn pose(&self) -> Result<SphericalPose> {
        SphericalPose::new(self.theta, self.phi, self.radius)
    }
}

fn apply_distill(cfg: &mut DistillConfig, a: &DistillArgs, seed: Option<u64>) {
    set(&mut cfg.iterations, a.iterations);
    set(&mut cfg.grid_resolution, a.grid_res);
    set(&mut cfg.samples_per_ray, a.samples_per_ray);
    set(&mut cfg.grid_lr, a.grid_lr);
    set(&mut cfg.seed, seed);
}

/// Streams progress lines to an optional file and every `every`-th to stderr.
struct Progress {
    file: Option<fs::File>,
    every: usize,
}

impl Progress {
    fn open(path: Option<&Path>, every: usize) -> Result<Self> {
        let file = match path {
            Some(p) => {
                create_parent(p)?;
                let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
                Some(f)
            }
            None => None,
        };
        eprintln!("{LOG_HEADER}");
        Ok(Self {
            file,
            every: every.max(1),
        })
    }

    fn line(&mut self, l: &IterLog) {
        if let Some(f) = &mut self.file {
            // Progress output is advisory; a full disk surfaces on the grid write.
            let _ = writeln!(f, "{l}");
        }
        if l.iter % self.every == 0 || l.iter == 1 {
            eprintln!("{l}");
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub input_pose: PoseConfig,
    pub distill: DistillConfig,
    pub log_every: usize,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            input_pose: PoseConfig::default(),
            distill: DistillConfig::default(),
            log_every: 100,
        }
    }
}

pub(super) fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let mut cfg: ReconstructConfig = load_config(a.common.config.as_deref())?;
    cfg.input_pose.apply(&a.pose);
    apply_distill(&mut cfg.distill, &a.distill, a.common.seed);
    let guidance = guidance_for_distillation(
        GuidanceConfig::default(),
        a.guidance.or(Some(cfg.distill.guidance_scale)),
    )?;
    cfg.distill.guidance_scale = guidance.scale;
    log_config("reconstruct", &cfg);
    let model = load_model(&a.ckpt)?;
    let x = Image::read_ppm(&a.input)?;
    if x.width != model.resolution() {
        return Err(Error::InvalidArgument(format!(
            "input is {}x{}, model resolution is {}",
            x.width,
            x.height,
            model.resolution()
        )));
    }
    let sched = NoiseSchedule::linear(model.config.steps)?;
    let score = ScoreModel::Learned {
        model: &model,
        guidance,
        sched,
    };
    let mut progress = Progress::open(a.distill.log.as_deref(), cfg.log_every)?;
    let mut rng = Rng::seed_from_u64(cfg.distill.seed);
    let grid = distill(
        &x,
        &cfg.input_pose.pose()?,
        &score,
        &cfg.distill,
        &mut rng,
        |l| progress.line(l),
    )?;
    create_parent(&a.out)?;
    grid.checkpoint().save(&a.out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleReconConfig {
    pub shape: Shape,
    pub albedo: [f64; 3],
    /// Replaces `shape` with a generated object when set.
    pub object_seed: Option<u64>,
    pub light: [f64; 3],
    pub input_pose: PoseConfig,
    /// Input view and render resolution.
    pub resolution: usize,
    /// Lattice used to mesh the ground-truth surface.
    pub gt_mesh_resolution: usize,
    pub distill: DistillConfig,
    pub log_every: usize,
}

impl Default for OracleReconConfig {
    fn default() -> Self {
        Self {
            shape: Shape::Sphere { radius: 0.3 },
            albedo: [0.8, 0.3, 0.2],
            object_seed: None,
            light: [0.3, 0.8, 0.5],
            input_pose: PoseConfig::default(),
            resolution: 64,
            gt_mesh_resolution: 64,
            distill: DistillConfig {
                iterations: 1500,
                ..Default::default()
            },
            log_every: 100,
        }
    }
}

impl OracleReconConfig {
    pub fn object(&self) -> SceneObject {
        match self.object_seed {
            Some(s) => generate_object(s),
            None => SceneObject::single(self.shape, self.albedo),
        }
    }

    pub fn light(&self) -> DirectionalLight {
        DirectionalLight::new(nalgebra::Vector3::from(self.light))
    }
}

pub(super) fn oracle_recon(a: OracleReconArgs) -> Result<()> {
    let mut cfg: OracleReconConfig = load_config(a.common.config.as_deref())?;
    cfg.input_pose.apply(&a.pose);
    apply_distill(&mut cfg.distill, &a.distill, a.common.seed);
    set(&mut cfg.resolution, a.res);
    if a.object_seed.is_some() {
        cfg.object_seed = a.object_seed;
    }
    if let Some(radius) = a.sphere_radius {
        cfg.shape = Shape::Sphere { radius };
    }
    log_config("oracle-recon", &cfg);
    let object = cfg.object();
    let light = cfg.light();
    let pose = cfg.input_pose.pose()?;
    let x = render_pose(&object, &pose, cfg.resolution, &light);
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    x.write_ppm(&a.out_dir.join("input.ppm"))?;
    mesh_sdf(&object, cfg.gt_mesh_resolution)?.write_obj(&a.out_dir.join("gt.obj"))?;
    let log_path = a
        .distill
        .log
        .clone()
        .unwrap_or_else(|| a.out_dir.join("progress.csv"));
    let mut progress = Progress::open(Some(&log_path), cfg.log_every)?;
    let mut rng = Rng::seed_from_u64(cfg.distill.seed);
    let score = ScoreModel::Oracle { object, light };
    let grid = distill(&x, &pose, &score, &cfg.distill, &mut rng, |l| {
        progress.line(l)
    })?;
    grid.checkpoint().save(&a.out_dir.join("grid.vfck"))
}

pub(super) fn extract_mesh(a: ExtractMeshArgs) -> Result<()> {
    let mut cfg: ExtractSettings = load_config(a.common.config.as_deref())?;
    set(&mut cfg.resolution, a.res);
    set(&mut cfg.threshold_multiple, a.threshold_multiple);
    log_config("extract-mesh", &cfg);
    let grid = VoxelGrid::from_checkpoint(&Checkpoint::load(&a.grid)?)?;
    let mesh = extract(&grid, &cfg)?;
    create_parent(&a.out)?;
    mesh.write_obj(&a.out)?;
    eprintln!(
        "{} vertices, {} triangles, watertight {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.is_watertight()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePair {
    pub pred: PathBuf,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshPair {
    pub pred: PathBuf,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObject {
    pub id: String,
    #[serde(default)]
    pub views: Vec<ImagePair>,
    #[serde(default)]
    pub mesh: Option<MeshPair>,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationManifest {
    pub objects: Vec<ManifestObject>,
}

impl EvaluationManifest {
    fn rebase(mut self, root: &Path) -> Self {
        for o in &mut self.objects {
            for v in &mut o.views {
                v.pred = root.join(&v.pred);
                v.gt = root.join(&v.gt);
            }
            if let Some(m) = &mut o.mesh {
                m.pred = root.join(&m.pred);
                m.gt = root.join(&m.gt);
            }
        }
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub seed: u64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Text report with per-object image and shape scores plus dataset means.
pub fn evaluate_report(manifest: &EvaluationManifest, seed: u64) -> Result<String> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "viewforge evaluation report").unwrap();
    writeln!(w, "note: PSNR uses peak 1.0. SSIM uses an 11x11 Gaussian window (sigma 1.5) over the valid region.").unwrap();
    writeln!(
        w,
        "note: Chamfer is the mean non-squared nearest-neighbour distance, averaged over both directions, \
         on {SAMPLE_POINTS} surface samples per mesh after unit-cube normalization; IoU uses {IOU_RESOLUTION}^3 voxels."
    )
    .unwrap();
    writeln!(
        w,
        "note: these magnitudes are not comparable to published benchmark tables."
    )
    .unwrap();

    writeln!(w, "\n[novel view synthesis]").unwrap();
    writeln!(
        w,
        "{:<16} {:>5} {:>10} {:>8} {:>6}",
        "object", "views", "psnr", "ssim", "lpips"
    )
    .unwrap();
    let (mut all_psnr, mut all_ssim) = (Vec::new(), Vec::new());
    for o in manifest.objects.iter().filter(|o| !o.views.is_empty()) {
        let (mut p, mut s) = (Vec::new(), Vec::new());
        for v in &o.views {
            let (a, b) = (Image::read_ppm(&v.pred)?, Image::read_ppm(&v.gt)?);
            p.push(psnr(&a, &b)?);
            s.push(ssim(&a, &b)?);
        }
        let (mp, ms) = (mean(&p), mean(&s));
        writeln!(
            w,
            "{:<16} {:>5} {:>10.4} {:>8.4} {:>6}",
            o.id,
            p.len(),
            mp,
            ms,
            "n/a"
        )
        .unwrap();
        all_psnr.push(mp);
        all_ssim.push(ms);
    }
    if !all_psnr.is_empty() {
        writeln!(
            w,
            "{:<16} {:>5} {:>10.4} {:>8.4} {:>6}",
            "mean",
            all_psnr.len(),
            mean(&all_psnr),
            mean(&all_ssim),
            "n/a"
        )
        .unwrap();
    }
    writeln!(w, "fid: n/a").unwrap();

    writeln!(w, "\n[3d reconstruction]").unwrap();
    writeln!(
        w,
        "{:<16} {:>10} {:>8} {:>10}",
        "object", "chamfer", "iou", "watertight"
    )
    .unwrap();
    let (mut cds, mut ious) = (Vec::new(), Vec::new());
    for o in &manifest.objects {
        let Some(m) = &o.mesh else { continue };
        let (pred, gt) = (TriMesh::read_obj(&m.pred)?, TriMesh::read_obj(&m.gt)?);
        let sc = compare_meshes(&pred, &gt, &mut rng)?;
        writeln!(
            w,
            "{:<16} {:>10.6} {:>8.4} {:>10}",
            o.id, sc.chamfer, sc.iou, sc.watertight
        )
        .unwrap();
        cds.push(sc.chamfer);
        ious.push(sc.iou);
    }
    if !cds.is_empty() {
        writeln!(
            w,
            "{:<16} {:>10.6} {:>8.4}",
            "mean",
            mean(&cds),
            mean(&ious)
        )
        .unwrap();
    }
    Ok(out)
}

pub(super) fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg: EvaluateConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.seed, a.common.seed);
    log_config("evaluate", &cfg);
    let mut manifest = match &a.manifest {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let m: EvaluationManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            m.rebase(path.parent().unwrap_or(Path::new(".")))
        }
        None => EvaluationManifest {
            objects: Vec::new(),
        },
    };
    let single = ManifestObject {
        id: "single".into(),
        views: match (&a.pred_image, &a.gt_image) {
            (Some(p), Some(g)) => vec![ImagePair {
                pred: p.clone(),
                gt: g.clone(),
            }],
            (None, None) => Vec::new(),
            _ => {
                return Err(Error::InvalidArgument(
                    "--pred-image and --gt-image go together".into(),
                ))
            }
        },
        mesh: match (&a.pred_mesh, &a.gt_mesh) {
            (Some(p), Some(g)) => Some(MeshPair {
                pred: p.clone(),
                gt: g.clone(),
            }),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidArgument(
                    "--pred-mesh and --gt-mesh go together".into(),
                ))
            }
        },
    };
    if !single.views.is_empty() || single.mesh.is_some() {
        manifest.objects.push(single);
    }
    if manifest.objects.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to evaluate: pass --manifest or prediction/ground-truth pairs".into(),
        ));
    }
    let report = evaluate_report(&manifest, cfg.seed)?;
    print!("{report}");
    if let Some(path) = &a.out {
        write_text(path, &report)?;
    }
    Ok(())
}

pub(super) fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    log_config("gradcheck", &EvaluateConfig { seed });
    let lines = gradcheck_suite(seed)?;
    println!(
        "{:<24} {:>12} {:>10}  status",
        "group", "max_rel_err", "tolerance"
    );
    for l in &lines {
        println!(
            "{:<24} {:>12.3e} {:>10.0e}  {}",
            l.group,
            l.error,
            l.tolerance,
            if l.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = lines
        .iter()
        .filter(|l| !l.passed())
        .map(|l| l.group.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!(
            "gradients disagree for {}",
            failed.join(", ")
        )))
    }
}
