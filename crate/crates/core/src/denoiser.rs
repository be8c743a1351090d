//! Conditional U-Net noise predictor.
//!
//! Two conditioning streams reach the network:
//! - the input view is concatenated channel-wise with the noisy image, and
//! - a posed embedding, `fuse(concat(image_embed, pose))`, is combined with
//!   the timestep embedding and injected into every residual block as a
//!   per-channel scale and shift.
//!
//! Both streams have a null form (zeros for the view, a learned vector for the
//! embedding) used for classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Checkpoint, Element, Graph, ParamSet, Tensor, Var};
use crate::camera::PoseEncoding;
use crate::error::{Error, Result};
use crate::image::Image;

pub const EMBED_DIM: usize = 64;
pub const POSE_DIM: usize = 4;
const CONFIG_ENTRY: &str = "meta.config";
pub const TIME_FREQS: usize = 16;
const ENCODER_WIDTHS: [usize; 4] = [16, 32, 64, EMBED_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub resolution: usize,
    /// Channel widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub groups: usize,
    /// Diffusion steps; valid timesteps are `1..=steps`.
    pub steps: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            widths: [32, 64, 128],
            groups: 8,
            steps: 1000,
            init_seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of 16",
                self.resolution
            )));
        }
        for &w in &self.widths {
            if w == 0 || w % self.groups.max(1) != 0 {
                return Err(Error::Config(format!(
                    "width {w} not divisible by {} groups",
                    self.groups
                )));
            }
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Posed conditioning embedding for one input view and relative pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningEmbedding {
    pub image_embed: Vec<f32>,
    pub pose: PoseEncoding,
    pub fused: Vec<f32>,
}

/// Everything the conditional branch needs: the posed embedding and the view
/// to concatenate.
#[derive(Debug, Clone)]
pub struct Condition {
    pub embedding: ConditioningEmbedding,
    pub input: Image,
}

/// Interface shared by the network and by test stubs.
pub trait NoisePredictor: Sync {
    fn resolution(&self) -> usize;

    /// Noise estimate for planar `3×H×W` `z_t`. `None` selects the
    /// unconditional branch.
    fn predict(&self, z_t: &[f32], t: usize, cond: Option<&Condition>) -> Result<Vec<f32>>;

    /// Builds the conditional branch input.
    fn condition(&self, input: &Image, pose: &PoseEncoding) -> Result<Condition>;
}

/// Conditional U-Net with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

/// Parameter slots bound lazily into one graph.
pub(crate) struct Binder<'a, T: Element> {
    params: &'a ParamSet,
    vars: Vec<Option<Var>>,
    _t: std::marker::PhantomData<T>,
}

impl<'a, T: Element> Binder<'a, T> {
    pub(crate) fn new(params: &'a ParamSet) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
            _t: std::marker::PhantomData,
        }
    }

    pub(crate) fn get(&mut self, g: &mut Graph<T>, name: &str) -> Var {
        let slot = self
            .params
            .slot(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        *self.vars[slot].get_or_insert_with(|| g.param(self.params.at(slot)))
    }

    /// Bound graph variable per parameter slot.
    pub(crate) fn vars(&self) -> &[Option<Var>] {
        &self.vars
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

fn sinusoid(t: usize) -> Vec<f64> {
    (0..TIME_FREQS)
        .map(|k| t as f64 * (-(10_000f64).ln() * k as f64 / TIME_FREQS as f64).exp())
        .collect()
}

/// Sinusoidal timestep features `[sin(t·ω_k), cos(t·ω_k)]`.
pub fn timestep_features(t: usize) -> Vec<f64> {
    let a = sinusoid(t);
    a.iter()
        .map(|v| v.sin())
        .chain(a.iter().map(|v| v.cos()))
        .collect()
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mut p = ParamSet::new();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        let mut cin = 3;
        for (i, &w) in ENCODER_WIDTHS.iter().enumerate() {
            p.insert(
                format!("enc.conv{i}.w"),
                init.normal(&[w, cin, 3, 3], he(cin * 9)),
            );
            p.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[w]));
            cin = w;
        }
        let fuse_in = EMBED_DIM + POSE_DIM;
        p.insert(
            "fuse.w",
            init.normal(&[EMBED_DIM, fuse_in], (1.0 / fuse_in as f64).sqrt()),
        );
        p.insert("fuse.b", Tensor::zeros(&[EMBED_DIM]));
        p.insert("null_embed", init.normal(&[EMBED_DIM], 0.1));

        p.insert(
            "unet.time.l1.w",
            init.normal(&[EMBED_DIM, 2 * TIME_FREQS], he(2 * TIME_FREQS)),
        );
        p.insert("unet.time.l1.b", Tensor::zeros(&[EMBED_DIM]));
        p.insert(
            "unet.time.l2.w",
            init.normal(&[EMBED_DIM, EMBED_DIM], he(EMBED_DIM)),
        );
        p.insert("unet.time.l2.b", Tensor::zeros(&[EMBED_DIM]));

        let [c1, c2, c3] = config.widths;
        let conv =
            |p: &mut ParamSet, init: &mut Init, name: &str, cout: usize, cin: usize, gain: f64| {
                p.insert(
                    format!("{name}.w"),
                    init.normal(&[cout, cin, 3, 3], gain * he(cin * 9)),
                );
                p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
            };
        conv(&mut p, &mut init, "unet.in", c1, 6, 1.0);
        for (name, c) in Self::blocks(&config.widths) {
            for k in 1..=2 {
                p.insert(format!("{name}.gn{k}.g"), Tensor::zeros(&[c]));
                p.insert(format!("{name}.gn{k}.b"), Tensor::zeros(&[c]));
            }
            conv(&mut p, &mut init, &format!("{name}.conv1"), c, c, 1.0);
            conv(&mut p, &mut init, &format!("{name}.conv2"), c, c, 0.1);
            for part in ["scale", "shift"] {
                p.insert(
                    format!("{name}.film_{part}.w"),
                    init.normal(&[c, 2 * EMBED_DIM], 0.1 / (2.0 * EMBED_DIM as f64).sqrt()),
                );
                p.insert(format!("{name}.film_{part}.b"), Tensor::zeros(&[c]));
            }
        }
        conv(&mut p, &mut init, "unet.down1", c2, c1, 1.0);
        conv(&mut p, &mut init, "unet.down2", c3, c2, 1.0);
        conv(&mut p, &mut init, "unet.merge2", c2, c3 + c2, 1.0);
        conv(&mut p, &mut init, "unet.merge1", c1, c2 + c1, 1.0);
        p.insert("unet.out_gn.g", Tensor::zeros(&[c1]));
        p.insert("unet.out_gn.b", Tensor::zeros(&[c1]));
        conv(&mut p, &mut init, "unet.out", 3, c1, 0.1);
        Ok(Self { config, params: p })
    }

    /// Residual block names and widths in evaluation order.
    fn blocks(widths: &[usize; 3]) -> Vec<(String, usize)> {
        let [c1, c2, c3] = *widths;
        vec![
            ("unet.l1.res0".into(), c1),
            ("unet.l1.res1".into(), c1),
            ("unet.l2.res0".into(), c2),
            ("unet.l2.res1".into(), c2),
            ("unet.l3.res0".into(), c3),
            ("unet.l3.res1".into(), c3),
            ("unet.u2.res0".into(), c2),
            ("unet.u1.res0".into(), c1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameters plus a `meta.config` entry recording the architecture.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        let c = &self.config;
        let meta = [
            c.resolution,
            c.widths[0],
            c.widths[1],
            c.widths[2],
            c.groups,
            c.steps,
        ];
        ck.push(
            CONFIG_ENTRY,
            Tensor::new(vec![meta.len()], meta.iter().map(|&v| v as f32).collect())
                .expect("meta shape"),
        );
        ck
    }

    /// Rebuilds a model from a checkpoint written by [`Denoiser::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck
            .get(CONFIG_ENTRY)
            .ok_or_else(|| Error::Checkpoint(format!("missing {CONFIG_ENTRY}")))?;
        if meta.data.len() != 6 || meta.data.iter().any(|v| !(*v >= 1.0) || v.fract() != 0.0) {
            return Err(Error::Checkpoint(format!(
                "malformed {CONFIG_ENTRY}: {:?}",
                meta.data
            )));
        }
        let m: Vec<usize> = meta.data.iter().map(|&v| v as usize).collect();
        let mut d = Self::new(DenoiserConfig {
            resolution: m[0],
            widths: [m[1], m[2], m[3]],
            groups: m[4],
            steps: m[5],
            init_seed: 0,
        })?;
        d.load_checkpoint(ck)?;
        Ok(d)
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_into(&mut self.params)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let r = self.config.resolution;
        if img.width != r || img.height != r {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}, model resolution is {r}x{r}",
                img.width, img.height
            )));
        }
        Ok(())
    }

    fn conv_named<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        name: &str,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let w = b.get(g, &format!("{name}.w"));
        let bias = b.get(g, &format!("{name}.b"));
        g.conv2d(x, w, Some(bias), stride)
    }

    fn norm_act<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let h = g.group_norm(x, self.config.groups)?;
        let gamma = b.get(g, &format!("{name}.g"));
        let beta = b.get(g, &format!("{name}.b"));
        let h = g.film(h, gamma, beta)?;
        Ok(g.silu(h))
    }

    fn linear_named<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let w = b.get(g, &format!("{name}.w"));
        let bias = b.get(g, &format!("{name}.b"));
        g.linear(x, w, Some(bias))
    }

    /// Image embedding of the input view: four stride-2 convolutions and a
    /// global average pool. `view` is planar `3×H×W` in `[-1, 1]`.
    pub(crate) fn graph_image_embed<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        view: Var,
    ) -> Result<Var> {
        let mut h = view;
        for i in 0..ENCODER_WIDTHS.len() {
            h = self.conv_named(g, b, &format!("enc.conv{i}"), h, 2)?;
            h = g.silu(h);
        }
        let s = g.shape(h).to_vec();
        let hw = s[1] * s[2];
        let flat = g.reshape(h, &[s[0], hw])?;
        let avg = g.constant(&[hw, 1], vec![T::from_f64(1.0 / hw as f64); hw])?;
        let pooled = g.matmul(flat, avg)?;
        g.reshape(pooled, &[s[0]])
    }

    /// Posed embedding `fuse(concat(image_embed, pose))`.
    pub(crate) fn graph_embedding<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        view: Var,
        pose: &PoseEncoding,
    ) -> Result<(Var, Var)> {
        let img = self.graph_image_embed(g, b, view)?;
        let pv = g.constant(
            &[POSE_DIM],
            pose.0.iter().map(|&v| T::from_f64(v)).collect(),
        )?;
        let cat = g.concat(&[img, pv])?;
        let fused = self.linear_named(g, b, "fuse", cat)?;
        Ok((img, fused))
    }

    /// Noise prediction. `embedding = None` selects the learned null
    /// embedding; `view = None` concatenates zeros.
    pub(crate) fn graph_predict<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        z_t: Var,
        t: usize,
        embedding: Option<Var>,
        view: Option<Var>,
    ) -> Result<Var> {
        if t == 0 || t > self.config.steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.config.steps
            )));
        }
        let zs = g.shape(z_t).to_vec();
        let r = self.config.resolution;
        if zs != [3, r, r] {
            return Err(Error::Shape {
                op: "predict_noise",
                lhs: zs,
                rhs: vec![3, r, r],
            });
        }
        let view = match view {
            Some(v) => v,
            None => g.constant(&[3, r, r], vec![T::zero(); 3 * r * r])?,
        };
        let emb = match embedding {
            Some(e) => e,
            None => b.get(g, "null_embed"),
        };

        let feats = g.constant(
            &[2 * TIME_FREQS],
            timestep_features(t).into_iter().map(T::from_f64).collect(),
        )?;
        let te = self.linear_named(g, b, "unet.time.l1", feats)?;
        let te = g.silu(te);
        let te = self.linear_named(g, b, "unet.time.l2", te)?;
        let cond = g.concat(&[emb, te])?;
        let cond = g.silu(cond);

        let x = g.concat(&[z_t, view])?;
        let mut h = self.conv_named(g, b, "unet.in", x, 1)?;
        let blocks = Self::blocks(&self.config.widths);
        let res = |g: &mut Graph<T>, b: &mut Binder<T>, idx: usize, h: Var| -> Result<Var> {
            let name = &blocks[idx].0;
            let a = self.norm_act(g, b, &format!("{name}.gn1"), h)?;
            let a = self.conv_named(g, b, &format!("{name}.conv1"), a, 1)?;
            let scale = self.linear_named(g, b, &format!("{name}.film_scale"), cond)?;
            let shift = self.linear_named(g, b, &format!("{name}.film_shift"), cond)?;
            let a = g.film(a, scale, shift)?;
            let a = self.norm_act(g, b, &format!("{name}.gn2"), a)?;
            let a = self.conv_named(g, b, &format!("{name}.conv2"), a, 1)?;
            g.add(h, a)
        };
        h = res(g, b, 0, h)?;
        h = res(g, b, 1, h)?;
        let skip1 = h;
        h = self.conv_named(g, b, "unet.down1", h, 2)?;
        h = res(g, b, 2, h)?;
        h = res(g, b, 3, h)?;
        let skip2 = h;
        h = self.conv_named(g, b, "unet.down2", h, 2)?;
        h = res(g, b, 4, h)?;
        h = res(g, b, 5, h)?;
        h = g.upsample2(h)?;
        h = g.concat(&[h, skip2])?;
        h = self.conv_named(g, b, "unet.merge2", h, 1)?;
        h = res(g, b, 6, h)?;
        h = g.upsample2(h)?;
        h = g.concat(&[h, skip1])?;
        h = self.conv_named(g, b, "unet.merge1", h, 1)?;
        h = res(g, b, 7, h)?;
        let h = self.norm_act(g, b, "unet.out_gn", h)?;
        self.conv_named(g, b, "unet.out", h, 1)
    }

    /// Posed conditioning embedding of `(x_input, pose)`.
    pub fn embed_condition(
        &self,
        x_input: &Image,
        pose: &PoseEncoding,
    ) -> Result<ConditioningEmbedding> {
        self.check_image(x_input)?;
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.params);
        let view = g.constant_f32(
            &[3, x_input.height, x_input.width],
            &x_input.to_chw_signed(),
        )?;
        let (img, fused) = self.graph_embedding(&mut g, &mut b, view, pose)?;
        let fused = g.value(fused).to_vec();
        if fused.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conditioning embedding".into()));
        }
        Ok(ConditioningEmbedding {
            image_embed: g.value(img).to_vec(),
            pose: *pose,
            fused,
        })
    }

    /// Noise estimate for planar `z_t`. `cond = None` selects the null
    /// embedding; `x_input = None` concatenates zeros.
    pub fn predict_noise(
        &self,
        z_t: &[f32],
        t: usize,
        cond: Option<&ConditioningEmbedding>,
        x_input: Option<&Image>,
    ) -> Result<Vec<f32>> {
        let r = self.config.resolution;
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.params);
        let z = g.constant_f32(&[3, r, r], z_t)?;
        let emb = match cond {
            Some(c) => Some(g.constant_f32(&[EMBED_DIM], &c.fused)?),
            None => None,
        };
        let view = match x_input {
            Some(img) => {
                self.check_image(img)?;
                Some(g.constant_f32(&[3, r, r], &img.to_chw_signed())?)
            }
            None => None,
        };
        let out = self.graph_predict(&mut g, &mut b, z, t, emb, view)?;
        Ok(g.value(out).to_vec())
    }
}

impl NoisePredictor for Denoiser {
    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn predict(&self, z_t: &[f32], t: usize, cond: Option<&Condition>) -> Result<Vec<f32>> {
        match cond {
            Some(c) => self.predict_noise(z_t, t, Some(&c.embedding), Some(&c.input)),
            None => self.predict_noise(z_t, t, None, None),
        }
    }

    fn condition(&self, input: &Image, pose: &PoseEncoding) -> Result<Condition> {
        Ok(Condition {
            embedding: self.embed_condition(input, pose)?,
            input: input.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;

    fn tiny() -> Denoiser {
        Denoiser::new(DenoiserConfig {
            resolution: 16,
            widths: [8, 8, 16],
            groups: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn test_image(r: usize, phase: f32) -> Image {
        let px = (0..r * r * 3)
            .map(|i| 0.5 + 0.4 * ((i as f32) * 0.13 + phase).sin())
            .collect();
        Image::from_pixels(r, r, px).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_restores_architecture() {
        let d = tiny();
        let ck = Checkpoint::decode(&d.checkpoint().encode()).unwrap();
        let e = Denoiser::from_checkpoint(&ck).unwrap();
        assert_eq!(e.config.widths, d.config.widths);
        assert_eq!(e.params, d.params);
        assert_eq!(e.checkpoint().encode(), d.checkpoint().encode());
    }

    #[test]
    fn output_shape_and_null_call() {
        let d = tiny();
        let z: Vec<f32> = (0..3 * 256)
            .map(|i| ((i * 31) % 17) as f32 / 8.0 - 1.0)
            .collect();
        let out = d.predict_noise(&z, 500, None, None).unwrap();
        assert_eq!(out.len(), z.len());
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedding_is_deterministic_and_sized() {
        let d = tiny();
        let img = test_image(16, 0.0);
        let pose = PoseEncoding([0.1, 0.5f64.sin(), 0.5f64.cos(), 0.0]);
        let a = d.embed_condition(&img, &pose).unwrap();
        let b = d.embed_condition(&img, &pose).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fused.len(), EMBED_DIM);
        assert_eq!(a.image_embed.len(), EMBED_DIM);
        assert_eq!(d.params.get("fuse.w").unwrap().shape, vec![64, 68]);
    }

    #[test]
    fn wrong_resolution_rejected() {
        let d = tiny();
        let pose = PoseEncoding([0.0, 0.0, 1.0, 0.0]);
        assert!(d.embed_condition(&test_image(32, 0.0), &pose).is_err());
    }

    #[test]
    fn timestep_range_checked() {
        let d = tiny();
        let z = vec![0.0; 3 * 256];
        assert!(d.predict_noise(&z, 0, None, None).is_err());
        assert!(d.predict_noise(&z, 1001, None, None).is_err());
        assert!(d.predict_noise(&z, 1000, None, None).is_ok());
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut d = tiny();
        for slot in 0..d.params.len() {
            d.params.at_mut(slot).data.fill(0.0);
        }
        let bias = [0.25f32, -0.5, 0.75];
        d.params
            .get_mut("unet.out.b")
            .unwrap()
            .data
            .copy_from_slice(&bias);
        let z: Vec<f32> = (0..3 * 256).map(|i| (i as f32 * 0.01).cos()).collect();
        let out = d
            .predict_noise(&z, 17, None, Some(&test_image(16, 1.0)))
            .unwrap();
        for c in 0..3 {
            assert!(out[c * 256..(c + 1) * 256].iter().all(|&v| v == bias[c]));
        }
    }

    #[test]
    fn time_features_distinct() {
        let ts: Vec<usize> = (0..16).map(|i| 1 + i * 62).chain([2]).collect();
        for (i, &a) in ts.iter().enumerate() {
            for &b in &ts[i + 1..] {
                let (fa, fb) = (timestep_features(a), timestep_features(b));
                let d: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-6, "{a} vs {b}");
            }
        }
        assert_eq!(timestep_features(1).len(), 2 * TIME_FREQS);
    }

    #[test]
    fn parameter_count_independent_of_input() {
        let d = tiny();
        let n = d.param_count();
        let _ = d.predict_noise(&vec![0.1; 3 * 256], 3, None, None).unwrap();
        assert_eq!(d.param_count(), n);
    }

    #[test]
    fn gradient_wrt_noisy_input() {
        let d = tiny();
        let z: Vec<f32> = (0..3 * 256)
            .map(|i| ((i * 7) % 13) as f32 / 6.5 - 1.0)
            .collect();
        let x = Tensor::new(vec![3, 16, 16], z).unwrap();
        let err = grad_check::<f64, _>(
            |g, x| {
                let mut b = Binder::new(&d.params);
                let out = d.graph_predict(g, &mut b, x, 250, None, None)?;
                Ok(g.sum(out))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "{err}");
    }
}
