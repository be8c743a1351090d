//! Finite-difference gradient suite behind the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{grad_check, op_suite, Element, Graph, Tensor, Var};
use crate::camera::{encode_pose, relative_pose, SphericalPose};
use crate::denoiser::{Binder, Denoiser, DenoiserConfig};
use crate::diffusion::{graph_example_loss, NoiseSchedule, NoisedExample};
use crate::error::Result;
use crate::image::Image;
use crate::voxelfield::{input_view_fd_check, RenderSettings, VoxelGrid};

pub const OP_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub group: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// Per-op maxima over all checked inputs, then the two end-to-end losses.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines: Vec<CheckLine> = Vec::new();
    for (name, err) in op_suite(seed)? {
        let group = name.split('/').next().unwrap_or(&name).to_string();
        match lines.iter_mut().find(|l| l.group == group) {
            Some(l) => l.error = l.error.max(err),
            None => lines.push(CheckLine {
                group,
                error: err,
                tolerance: OP_TOLERANCE,
            }),
        }
    }
    let (wrt_input, wrt_params) = denoiser_loss_check(seed)?;
    lines.push(CheckLine {
        group: "denoiser_loss/input".into(),
        error: wrt_input,
        tolerance: LOSS_TOLERANCE,
    });
    lines.push(CheckLine {
        group: "denoiser_loss/params".into(),
        error: wrt_params,
        tolerance: LOSS_TOLERANCE,
    });
    lines.push(CheckLine {
        group: "voxel_input_view_loss".into(),
        error: voxel_loss_check(seed)?,
        tolerance: LOSS_TOLERANCE,
    });
    Ok(lines)
}

fn noise_image(rng: &mut ChaCha8Rng, r: usize) -> Image {
    let px = (0..r * r * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::from_pixels(r, r, px).expect("sized")
}

/// Small denoiser with every parameter jittered off its initial value, so
/// zero-initialized norms and biases carry gradient too.
fn jittered_denoiser(rng: &mut ChaCha8Rng) -> Result<Denoiser> {
    let mut d = Denoiser::new(DenoiserConfig {
        resolution: 16,
        widths: [8, 8, 16],
        groups: 4,
        steps: 1000,
        init_seed: rng.random(),
    })?;
    for slot in 0..d.params.len() {
        for v in d.params.at_mut(slot).data.iter_mut() {
            *v += 0.05 * rng.sample::<f32, _>(StandardNormal);
        }
    }
    Ok(d)
}

fn loss_of<T: Element>(d: &Denoiser, g: &mut Graph<T>, ex: &NoisedExample, z: Var) -> Result<Var> {
    let mut b = Binder::new(&d.params);
    graph_example_loss(d, g, &mut b, ex, z)
}

/// Full training loss: error with respect to the noisy input and to a
/// spread of entries from every parameter tensor.
pub fn denoiser_loss_check(seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0e5);
    let d = jittered_denoiser(&mut rng)?;
    let r = 16;
    let sched = NoiseSchedule::linear(1000)?;
    let input = noise_image(&mut rng, r);
    let target = noise_image(&mut rng, r);
    let t = 300;
    let eps: Vec<f32> = (0..3 * r * r).map(|_| rng.sample(StandardNormal)).collect();
    let z_t = sched.forward_noise(&target.to_chw_signed(), t, &eps)?;
    let a = SphericalPose::new(1.1, 0.3, 1.8)?;
    let b = SphericalPose::new(1.6, 2.0, 2.1)?;
    let ex = NoisedExample {
        z_t: z_t.clone(),
        t,
        eps,
        input,
        encoding: encode_pose(&relative_pose(&a, &b)),
        drop_embedding: false,
        drop_view: false,
    };

    let z = Tensor::new(vec![3, r, r], z_t.clone())?;
    let wrt_input = grad_check::<f64, _>(|g, z| loss_of(&d, g, &ex, z), &z, 1e-4)?;

    let eval = |d: &Denoiser| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let z = g.constant_f32(&[3, r, r], &z_t)?;
        let l = loss_of(d, &mut g, &ex, z)?;
        Ok(g.item(l))
    };
    let mut g = Graph::<f64>::new();
    let mut binder = Binder::new(&d.params);
    let zv = g.constant_f32(&[3, r, r], &z_t)?;
    let loss = graph_example_loss(&d, &mut g, &mut binder, &ex, zv)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    let h = 1e-3f32;
    for (slot, var) in binder.vars().iter().enumerate() {
        let Some(var) = var else { continue };
        let analytic = grads.get(*var).map(|v| v.to_vec());
        let n = d.params.at(slot).data.len();
        for k in 0..3 {
            let i = (k * 7919 + slot * 31) % n;
            let ad = analytic.as_ref().map_or(0.0, |v| v[i]);
            let (mut hi, mut lo) = (d.clone(), d.clone());
            hi.params.at_mut(slot).data[i] += h;
            lo.params.at_mut(slot).data[i] -= h;
            let step = (hi.params.at(slot).data[i] - lo.params.at(slot).data[i]) as f64;
            let fd = (eval(&hi)? - eval(&lo)?) / step;
            worst = worst.max((ad - fd).abs() / (ad.abs() + fd.abs() + 1e-8));
        }
    }
    Ok((wrt_input, worst))
}

/// Input-view photometric loss of a random 8³ grid against a random target.
pub fn voxel_loss_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b0c_5e1d);
    let n = 8;
    let mut grid = VoxelGrid::new(n, 0.0, 0.0)?;
    for v in grid.density_raw.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    for v in grid.color_raw.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    let settings = RenderSettings {
        resolution: 8,
        samples_per_ray: 24,
    };
    let pose = SphericalPose::new(1.0, 0.5, 1.6)?;
    let target = noise_image(&mut rng, 8);
    input_view_fd_check(&grid, &pose, &target, &settings, 5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let lines = gradcheck_suite(0).unwrap();
        for l in &lines {
            assert!(l.passed(), "{l:?}");
        }
        assert!(lines.iter().any(|l| l.group == "conv2d_s2"));
    }
}
