//! DDPM schedule, the noise-prediction objective with conditioning dropout,
//! classifier-free guidance and ancestral sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{AdamW, AdamWConfig, Element, Graph, ParamSet, Var};
use crate::camera::{encode_pose, PoseEncoding, RelativePose};
use crate::denoiser::{Binder, Condition, Denoiser, DenoiserConfig, NoisePredictor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::parallel;
use crate::scene::{sample_pair, ViewDataset};

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const NVS_GUIDANCE: f64 = 3.0;
pub const DISTILL_GUIDANCE: f64 = 10.0;
pub const COND_DROP_PROB: f64 = 0.1;
/// Learning-rate multiplier for the freshly initialised fusion layer.
pub const FUSE_LR_MULTIPLIER: f32 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `BETA_START` to `BETA_END` over `steps` steps.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Cumulative product `ᾱ_t` for `t ∈ [1, T]`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn forward_noise(&self, z0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check(t)?;
        if z0.len() != eps.len() {
            return Err(Error::Shape {
                op: "forward_noise",
                lhs: vec![z0.len()],
                rhs: vec![eps.len()],
            });
        }
        let ab = self.alpha_bar_at(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0
            .iter()
            .zip(eps)
            .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
            .collect())
    }

    /// Timesteps visited by a sampler with `n` steps, in decreasing order.
    /// `n = T` is the full ancestral chain.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n == 0 || n > t {
            return Err(Error::InvalidArgument(format!(
                "sampler steps {n} outside [1, {t}]"
            )));
        }
        Ok((0..n).rev().map(|i| ((i + 1) * t) / n).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub cond_drop_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: NVS_GUIDANCE,
            cond_drop_prob: COND_DROP_PROB,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0) {
            return Err(Error::Config(format!("guidance scale {} < 1", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!(
                "cond_drop_prob {} outside [0, 1]",
                self.cond_drop_prob
            )));
        }
        Ok(())
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// One training example after noising and conditioning dropout.
#[derive(Debug, Clone)]
pub struct NoisedExample {
    pub z_t: Vec<f32>,
    pub t: usize,
    pub eps: Vec<f32>,
    pub input: Image,
    pub encoding: PoseEncoding,
    pub drop_embedding: bool,
    pub drop_view: bool,
}

/// Draws `t`, `ε` and the two independent dropout flags for one pair.
pub fn draw_example<R: Rng + ?Sized>(
    input: Image,
    target: &Image,
    encoding: PoseEncoding,
    sched: &NoiseSchedule,
    cond_drop_prob: f64,
    rng: &mut R,
) -> NoisedExample {
    let z0 = target.to_chw_signed();
    let t = rng.random_range(1..=sched.steps());
    let eps = standard_normal(rng, z0.len());
    let drop_embedding = rng.random_bool(cond_drop_prob);
    let drop_view = rng.random_bool(cond_drop_prob);
    let z_t = sched.forward_noise(&z0, t, &eps).expect("valid timestep");
    NoisedExample {
        z_t,
        t,
        eps,
        input,
        encoding,
        drop_embedding,
        drop_view,
    }
}

/// Per-example gradients, one optional buffer per parameter slot.
pub type SlotGrads = Vec<Option<Vec<f32>>>;

/// A trainable noise predictor.
pub trait EpsModel: Sync {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Squared-error loss `mean((ε − ε_θ)²)` and its parameter gradients.
    fn example_loss(&self, ex: &NoisedExample) -> Result<(f64, SlotGrads)>;
}

/// Builds `mse(ε_θ(z, t, c), ε)` for one example with `z` already on the graph.
pub(crate) fn graph_example_loss<T: Element>(
    d: &Denoiser,
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    ex: &NoisedExample,
    z: Var,
) -> Result<Var> {
    let r = d.config.resolution;
    let target = g.constant_f32(&[3, r, r], &ex.eps)?;
    let view = g.constant_f32(&[3, r, r], &ex.input.to_chw_signed())?;
    let emb = if ex.drop_embedding {
        None
    } else {
        Some(d.graph_embedding(g, b, view, &ex.encoding)?.1)
    };
    let view = (!ex.drop_view).then_some(view);
    let pred = d.graph_predict(g, b, z, ex.t, emb, view)?;
    g.mse_loss(pred, target)
}

impl EpsModel for Denoiser {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn example_loss(&self, ex: &NoisedExample) -> Result<(f64, SlotGrads)> {
        let r = self.config.resolution;
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.params);
        let z = g.constant_f32(&[3, r, r], &ex.z_t)?;
        let loss = graph_example_loss(self, &mut g, &mut b, ex, z)?;
        let value = g.item(loss) as f64;
        let mut grads = g.backward(loss)?;
        let slots = b
            .vars()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect();
        Ok((value, slots))
    }
}

/// One optimisation step on `examples`: mean loss, averaged gradients, AdamW.
/// Per-example work runs in parallel; gradients are reduced in example order.
pub fn train_on_examples<M: EpsModel>(
    model: &mut M,
    opt: &mut AdamW,
    examples: &[NoisedExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let results = {
        let m = &*model;
        parallel::map_indexed(examples.len(), |i| m.example_loss(&examples[i]))
    };
    let n = examples.len() as f32;
    let params = model.params_mut();
    for slot in 0..params.len() {
        params.at_mut(slot).grad = None;
    }
    let mut total = 0.0;
    for r in results {
        let (loss, grads) = r?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        total += loss;
        for (slot, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                params.at_mut(slot).accumulate_grad(&g);
            }
        }
    }
    for slot in 0..params.len() {
        if let Some(g) = params.at_mut(slot).grad.as_mut() {
            g.iter_mut().for_each(|v| *v /= n);
        }
    }
    opt.step(params)?;
    Ok(total / examples.len() as f64)
}

/// Draws a batch from `dataset` and takes one step.
pub fn train_step<M: EpsModel, R: Rng + ?Sized>(
    model: &mut M,
    dataset: &ViewDataset,
    batch_size: usize,
    sched: &NoiseSchedule,
    opt: &mut AdamW,
    cond_drop_prob: f64,
    rng: &mut R,
) -> Result<f64> {
    let examples: Vec<NoisedExample> = (0..batch_size)
        .map(|_| {
            let pair = sample_pair(dataset, rng);
            draw_example(
                pair.input,
                &pair.target,
                pair.encoding,
                sched,
                cond_drop_prob,
                rng,
            )
        })
        .collect();
    train_on_examples(model, opt, &examples)
}

/// `eps_uncond + s·(eps_cond − eps_uncond)`; `s = 1` evaluates only the
/// conditional branch.
pub fn cfg_predict<P: NoisePredictor + ?Sized>(
    model: &P,
    z_t: &[f32],
    t: usize,
    cond: &Condition,
    scale: f64,
) -> Result<Vec<f32>> {
    let c = model.predict(z_t, t, Some(cond))?;
    if scale == 1.0 {
        return Ok(c);
    }
    let u = model.predict(z_t, t, None)?;
    Ok(guide(&u, &c, scale))
}

pub fn guide(eps_uncond: &[f32], eps_cond: &[f32], scale: f64) -> Vec<f32> {
    eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(&u, &c)| (u as f64 + scale * (c as f64 - u as f64)) as f32)
        .collect()
}

/// Ancestral sampling over `steps` evenly strided timesteps (`steps = T` is
/// plain DDPM). Output is clamped to `[0, 1]`.
pub fn sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x_input: &Image,
    enc: &PoseEncoding,
    guidance: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
    steps: usize,
) -> Result<Image> {
    let cond = model.condition(x_input, enc)?;
    sample_with_condition(model, &cond, guidance, sched, rng, steps)
}

pub fn sample_with_condition<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    cond: &Condition,
    guidance: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
    steps: usize,
) -> Result<Image> {
    let r = model.resolution();
    let ts = sched.sampling_timesteps(steps)?;
    let mut z = standard_normal(rng, 3 * r * r);
    for (k, &t) in ts.iter().enumerate() {
        let eps = cfg_predict(model, &z, t, cond, guidance)?;
        let ab = sched.alpha_bar_at(t);
        let ab_prev = ts.get(k + 1).map_or(1.0, |&p| sched.alpha_bar_at(p));
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let noise = if k + 1 < ts.len() {
            standard_normal(rng, z.len())
        } else {
            vec![0.0; z.len()]
        };
        for i in 0..z.len() {
            let zi = z[i] as f64;
            let x0 = ((zi - (1.0 - ab).sqrt() * eps[i] as f64) / ab.sqrt()).clamp(-1.0, 1.0);
            z[i] = (c0 * x0 + ct * zi + sigma * noise[i] as f64) as f32;
        }
    }
    Ok(Image::from_chw_signed(r, r, &z).clamp01())
}

/// Novel view of `x` under the relative transform `rel`.
pub fn synthesize<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x: &Image,
    rel: &RelativePose,
    guidance: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
    steps: usize,
) -> Result<Image> {
    sample(model, x, &encode_pose(rel), guidance, sched, rng, steps)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// 32 here; the large-scale recipe used 1536.
    pub batch_size: usize,
    pub lr: f32,
    pub cond_drop_prob: f64,
    pub guidance_scale: f64,
    pub resolution: usize,
    #[serde(rename = "T")]
    pub diffusion_steps: usize,
    pub widths: [usize; 3],
    pub groups: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            steps: 2000,
            batch_size: 32,
            lr: AdamWConfig::default().lr,
            cond_drop_prob: COND_DROP_PROB,
            guidance_scale: NVS_GUIDANCE,
            resolution: d.resolution,
            diffusion_steps: DEFAULT_STEPS,
            widths: d.widths,
            groups: d.groups,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            resolution: self.resolution,
            widths: self.widths,
            groups: self.groups,
            steps: self.diffusion_steps,
            init_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        GuidanceConfig {
            scale: self.guidance_scale,
            cond_drop_prob: self.cond_drop_prob,
        }
        .validate()?;
        self.denoiser_config().validate()
    }

    pub fn optimizer(&self) -> AdamW {
        let mut opt = AdamW::new(AdamWConfig {
            lr: self.lr,
            ..Default::default()
        });
        opt.set_group_multiplier("fuse.", FUSE_LR_MULTIPLIER);
        opt
    }
}

/// Trains a fresh denoiser on `dataset`, calling `on_step(step, loss)` after
/// every step. Returns the model and the per-step losses.
pub fn train_denoiser<R: Rng + ?Sized>(
    dataset: &ViewDataset,
    config: &TrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Denoiser, Vec<f64>)> {
    config.validate()?;
    if dataset.resolution != config.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from configured {}",
            dataset.resolution, config.resolution
        )));
    }
    let mut model = Denoiser::new(config.denoiser_config())?;
    let sched = NoiseSchedule::linear(config.diffusion_steps)?;
    let mut opt = config.optimizer();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let loss = train_step(
            &mut model,
            dataset,
            config.batch_size,
            &sched,
            &mut opt,
            config.cond_drop_prob,
            rng,
        )?;
        losses.push(loss);
        on_step(step, loss);
    }
    Ok((model, losses))
}

/// Mean of the `window` losses ending at 1-based `step`.
pub fn smoothed_loss(losses: &[f64], step: usize, window: usize) -> f64 {
    let end = step.min(losses.len());
    let start = end.saturating_sub(window.max(1));
    let w = &losses[start..end];
    w.iter().sum::<f64>() / w.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::PoseEncoding;
    use crate::denoiser::ConditioningEmbedding;
    use crate::scene::build_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert!(s.beta.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.alpha_bar[0], 1.0 - s.beta[0]);
        assert!((s.beta[0] - 1e-4).abs() < 1e-15 && (s.beta[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let z0 = [0.3f32, -0.7, 0.9];
        let eps = [1.0f32, -2.0, 0.5];
        let z1 = s.forward_noise(&z0, 1, &eps).unwrap();
        for (a, b) in z1.iter().zip(&z0) {
            assert!((a - b).abs() < 0.03);
        }
        let zz = s.forward_noise(&[0.0; 3], 700, &eps).unwrap();
        let k = (1.0 - s.alpha_bar_at(700)).sqrt();
        for (a, e) in zz.iter().zip(&eps) {
            assert_eq!(*a, (k * *e as f64) as f32);
        }
        assert!(s.forward_noise(&z0, 0, &eps).is_err());
        assert!(s.forward_noise(&z0, 1001, &eps).is_err());
    }

    #[test]
    fn strided_timesteps() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let ts = s.sampling_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 20));
        assert_eq!(s.sampling_timesteps(1000).unwrap().last(), Some(&1));
    }

    struct Stub<F: Fn(&[f32], Option<&Condition>) -> Vec<f32> + Sync>(F);

    impl<F: Fn(&[f32], Option<&Condition>) -> Vec<f32> + Sync> NoisePredictor for Stub<F> {
        fn resolution(&self) -> usize {
            4
        }
        fn predict(&self, z: &[f32], _t: usize, c: Option<&Condition>) -> Result<Vec<f32>> {
            Ok((self.0)(z, c))
        }
        fn condition(&self, input: &Image, pose: &PoseEncoding) -> Result<Condition> {
            Ok(Condition {
                embedding: ConditioningEmbedding {
                    image_embed: vec![0.0; 64],
                    pose: *pose,
                    fused: vec![0.0; 64],
                },
                input: input.clone(),
            })
        }
    }

    fn stub_cond() -> Condition {
        Stub(|z: &[f32], _: Option<&Condition>| z.to_vec())
            .condition(&Image::white(4, 4), &PoseEncoding([0.0, 0.0, 1.0, 0.0]))
            .unwrap()
    }

    #[test]
    fn cfg_identities() {
        let z: Vec<f32> = (0..48).map(|i| i as f32 * 0.1 - 2.0).collect();
        let cond = stub_cond();
        let two = Stub(|z: &[f32], c: Option<&Condition>| {
            let k = if c.is_some() { 2.0 } else { 1.0 };
            z.iter().map(|v| v * k).collect()
        });
        let e1 = cfg_predict(&two, &z, 10, &cond, 1.0).unwrap();
        assert_eq!(e1, two.predict(&z, 10, Some(&cond)).unwrap());
        let e3 = cfg_predict(&two, &z, 10, &cond, 3.0).unwrap();
        for (a, v) in e3.iter().zip(&z) {
            assert!((a - 4.0 * v).abs() < 1e-5);
        }
        let same = Stub(|z: &[f32], _: Option<&Condition>| z.to_vec());
        for s in [1.0, 2.5, 7.0] {
            assert_eq!(cfg_predict(&same, &z, 10, &cond, s).unwrap(), z);
        }
    }

    #[test]
    fn cfg_linear_in_scale() {
        let u = [0.5f32, -1.0, 2.0];
        let c = [1.5f32, 0.0, -2.0];
        let (g1, g2, g3) = (guide(&u, &c, 1.0), guide(&u, &c, 2.0), guide(&u, &c, 3.0));
        for i in 0..3 {
            assert!(((g3[i] - g2[i]) - (g2[i] - g1[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_stub_sampling_is_deterministic() {
        let zero = Stub(|z: &[f32], _: Option<&Condition>| vec![0.0; z.len()]);
        let s = NoiseSchedule::linear(1000).unwrap();
        let img = Image::white(4, 4);
        let enc = PoseEncoding([0.0, 0.0, 1.0, 0.0]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&zero, &img, &enc, 3.0, &s, &mut rng, 50).unwrap()
        };
        let a = run(4);
        assert_eq!(a, run(4));
        assert_eq!((a.width, a.height), (4, 4));
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, run(5));
    }

    /// Knows the clean image, so its noise estimate is exact at every `t`.
    struct Clairvoyant {
        clean: Vec<f32>,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Clairvoyant {
        fn resolution(&self) -> usize {
            4
        }
        fn predict(&self, z: &[f32], t: usize, _c: Option<&Condition>) -> Result<Vec<f32>> {
            let ab = self.sched.alpha_bar_at(t);
            Ok(z.iter()
                .zip(&self.clean)
                .map(|(&z, &x)| ((z as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32)
                .collect())
        }
        fn condition(&self, input: &Image, pose: &PoseEncoding) -> Result<Condition> {
            stub_cond_for(input, pose)
        }
    }

    fn stub_cond_for(input: &Image, pose: &PoseEncoding) -> Result<Condition> {
        Stub(|z: &[f32], _: Option<&Condition>| z.to_vec()).condition(input, pose)
    }

    #[test]
    fn exact_predictor_samples_the_clean_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = Image::from_pixels(4, 4, (0..48).map(|_| rng.random::<f32>()).collect()).unwrap();
        let m = Clairvoyant {
            clean: target.to_chw_signed(),
            sched: NoiseSchedule::linear(1000).unwrap(),
        };
        let enc = PoseEncoding([0.0, 0.0, 1.0, 0.0]);
        for steps in [1, 7, 50, 1000] {
            let out = sample(&m, &target, &enc, 3.0, &m.sched, &mut rng, steps).unwrap();
            for (a, b) in out.pixels.iter().zip(&target.pixels) {
                assert!((a - b).abs() < 1e-3, "steps {steps}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dropout_rates() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Image::white(2, 2);
        let enc = PoseEncoding([0.0, 0.0, 1.0, 0.0]);
        let (mut de, mut dv, mut both) = (0, 0, 0);
        let n = 10_000;
        for _ in 0..n {
            let ex = draw_example(img.clone(), &img, enc, &s, 0.1, &mut rng);
            de += ex.drop_embedding as usize;
            dv += ex.drop_view as usize;
            both += (ex.drop_embedding && ex.drop_view) as usize;
        }
        for k in [de, dv] {
            let r = k as f64 / n as f64;
            assert!((0.08..=0.12).contains(&r), "{r}");
        }
        // independence: joint rate near 0.01
        assert!((both as f64 / n as f64 - 0.01).abs() < 0.005);
    }

    /// Returns the injected noise exactly and exposes no gradients.
    struct Oracle {
        params: ParamSet,
    }

    impl EpsModel for Oracle {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn example_loss(&self, ex: &NoisedExample) -> Result<(f64, SlotGrads)> {
            let pred = ex.eps.clone();
            let l = pred
                .iter()
                .zip(&ex.eps)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
            Ok((l / pred.len() as f64, vec![None; self.params.len()]))
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = build_dataset(2, 3, 16, &mut rng).unwrap();
        let mut params = ParamSet::new();
        params.insert("w", crate::autograd::Tensor::scalar(0.5));
        let mut m = Oracle { params };
        let s = NoiseSchedule::linear(1000).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let before = m.params.clone();
        let loss = train_step(&mut m, &ds, 4, &s, &mut opt, 0.1, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(
            m.params.get("w").unwrap().data,
            before.get("w").unwrap().data
        );
    }

    #[test]
    fn untrained_loss_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = build_dataset(2, 3, 16, &mut rng).unwrap();
        let mut m = Denoiser::new(DenoiserConfig {
            resolution: 16,
            widths: [8, 8, 16],
            groups: 4,
            ..Default::default()
        })
        .unwrap();
        let s = NoiseSchedule::linear(1000).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let loss = train_step(&mut m, &ds, 8, &s, &mut opt, 0.1, &mut rng).unwrap();
        assert!((loss - 1.0).abs() < 0.2, "{loss}");
    }

    #[test]
    fn smoothing_window() {
        let l = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(smoothed_loss(&l, 4, 2), 3.5);
        assert_eq!(smoothed_loss(&l, 1, 10), 1.0);
    }
}
