//! Approximate posterior over the 8×8 latent map, and latent sampling.
//!
//! The posterior looks at every frame of the video, future ones included,
//! stacked along channels. A tower of stride-2 3×3 convolutions brings the
//! input to 8×8, where two 1×1 heads read out `mu` and `log_sigma`.

use rand_chacha::ChaCha8Rng;
use sv2p_autodiff::{Bound, Padding, Real, Tape, Tensor, Var};

use crate::config::{LatentMode, ModelConfig, LATENT_SIZE};
use crate::dataset::VideoSequence;
use crate::error::{invalid, Result};
use crate::rng;

/// Where a latent came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    Posterior,
    Prior,
}

/// `mu` and clamped `log_sigma`, both `[B, 8, 8, C_z]`.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Stacks the frames of each video along channels: `[B, H, W, T·C]`.
pub fn stack_frames<T: Real>(videos: &[&VideoSequence], frames: usize) -> Result<Tensor<T>> {
    let Some(first) = videos.first() else {
        return invalid("no videos to stack");
    };
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(videos.len() * h * w * frames * c);
    for v in videos {
        if v.frames < frames {
            return invalid(format!(
                "the posterior needs all {frames} frames including future ones; video has {}",
                v.frames
            ));
        }
        if (v.height, v.width, v.channels) != (h, w, c) {
            return invalid("videos in one batch must share a frame shape");
        }
        for p in 0..h * w {
            for t in 0..frames {
                data.extend(v.frame(t)[p * c..(p + 1) * c].iter().map(|&x| T::lit(x as f64)));
            }
        }
    }
    Ok(Tensor::new(vec![videos.len(), h, w, frames * c], data)?)
}

/// Runs the inference tower on stacked frames `[B, H, W, T·C]`.
pub fn infer_posterior<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    stacked: Var,
) -> Result<Posterior> {
    let expected = config.frames * 3;
    match *tape.shape(stacked) {
        [_, h, w, c] if h == config.resolution && w == config.resolution && c == expected => {}
        ref s => {
            return invalid(format!(
                "posterior input must be [B, {0}, {0}, {expected}] (all {1} frames), got {s:?}",
                config.resolution, config.frames
            ))
        }
    }
    let mut x = stacked;
    for i in 0..config.inference_stages() {
        x = tape.conv2d(x, bound.get(&format!("inf/s{i}/k"))?, 2, Padding::SameZero)?;
        x = tape.add_bias(x, bound.get(&format!("inf/s{i}/b"))?)?;
        if config.instance_norm {
            x = tape.instance_norm(x, T::lit(1e-5))?;
        }
        x = tape.relu(x);
    }
    let mu = tape.conv2d(x, bound.get("inf/mu/k")?, 1, Padding::SameZero)?;
    let mu = tape.add_bias(mu, bound.get("inf/mu/b")?)?;
    let ls = tape.conv2d(x, bound.get("inf/ls/k")?, 1, Padding::SameZero)?;
    let ls = tape.add_bias(ls, bound.get("inf/ls/b")?)?;
    let log_sigma = tape.clamp_min(ls, T::lit(config.min_log_sigma));
    Ok(Posterior { mu, log_sigma })
}

/// `z = mu + exp(log_sigma) ⊙ noise`; the noise is a constant.
pub fn sample_latent<T: Real>(tape: &mut Tape<T>, posterior: Posterior, noise: Tensor<T>) -> Result<Var> {
    if tape.shape(posterior.mu) != noise.shape() {
        return invalid(format!(
            "noise {:?} does not match the posterior {:?}",
            noise.shape(),
            tape.shape(posterior.mu)
        ));
    }
    let eps = tape.constant(noise);
    let sigma = tape.exp(posterior.log_sigma);
    let scaled = tape.mul(sigma, eps)?;
    Ok(tape.add(posterior.mu, scaled)?)
}

pub fn latent_shape(config: &ModelConfig, batch: usize) -> [usize; 4] {
    [batch, LATENT_SIZE, LATENT_SIZE, config.latent_channels]
}

/// Independent standard-normal entries.
pub fn sample_prior<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    rng::normal_tensor(rng, shape)
}

/// Per-frame noise (or prior) draws for `steps` predicted frames: one draw
/// repeated in time-invariant mode, fresh draws in time-variant mode.
pub fn latent_plan<T: Real>(
    mode: LatentMode,
    steps: usize,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor<T>> {
    match mode {
        LatentMode::TimeInvariant => {
            let z = sample_prior(shape, rng);
            vec![z; steps]
        }
        LatentMode::TimeVariant => (0..steps).map(|_| sample_prior(shape, rng)).collect(),
    }
}
