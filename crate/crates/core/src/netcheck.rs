//! Finite-difference check of the whole model on a toy configuration.

use sv2p_autodiff::gradcheck::{grad_check_with, GradCheckOptions, GradCheckReport};
use sv2p_autodiff::{Bound, Tensor};

use crate::config::{LatentMode, ModelConfig};
use crate::generator::{rollout, Feed, RolloutInputs};
use crate::inference::{infer_posterior, latent_shape, sample_latent};
use crate::model::{init_params, param_shapes};
use crate::rng::{self, Domain};
use crate::trainer::{elbo_loss, kl_to_standard_normal, reconstruction_loss};
use crate::Result;

/// 8×8 frames, two motion kernels, one conv-LSTM level, actions on.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        resolution: 8,
        frames: 3,
        context: 1,
        enc_channels: vec![2],
        inf_channels: vec![2],
        masks: 2,
        kernel_size: 3,
        latent_channels: 1,
        latent_mode: LatentMode::TimeVariant,
        actions: true,
        ..ModelConfig::default()
    }
}

/// Checks gradients of the full training loss (posterior sample, rollout
/// with scheduled feeding, reconstruction plus weighted KL) with respect to
/// every parameter of [`toy_config`].
pub fn network_grad_check(seed: u64, tolerance: f64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let batch = 2;
    let mut rng = rng::stream(seed, Domain::Init, 1);
    let init = init_params::<f64>(&cfg, seed)?;
    let names: Vec<String> = param_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
    // Heads start at zero; perturb every tensor so no path is trivially flat.
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| {
            let t = init.get(n).expect("layout and init agree");
            let noise = rng::normal_vec::<f64>(&mut rng, t.numel());
            let data = t.data().iter().zip(noise).map(|(&v, e)| v + 0.1 * e).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        })
        .collect();

    let frame_shape = [batch, cfg.resolution, cfg.resolution, 3];
    let frames: Vec<Tensor<f64>> = (0..cfg.frames)
        .map(|_| Tensor::from_fn(frame_shape.to_vec(), |_| rand::Rng::random_range(&mut rng, 0.0..1.0)))
        .collect();
    let stacked = {
        let per = cfg.resolution * cfg.resolution * 3;
        let mut data = Vec::with_capacity(batch * per * cfg.frames);
        for b in 0..batch {
            for p in 0..cfg.resolution * cfg.resolution {
                for f in &frames {
                    data.extend_from_slice(&f.data()[b * per + p * 3..][..3]);
                }
            }
        }
        Tensor::new(vec![batch, cfg.resolution, cfg.resolution, 3 * cfg.frames], data)?
    };
    let actions: Vec<Tensor<f64>> = (0..cfg.frames)
        .map(|_| rng::normal_tensor(&mut rng, &[batch, crate::dataset::ACTION_DIM]))
        .collect();
    let steps = cfg.frames - cfg.context;
    let noise: Vec<Tensor<f64>> = (0..steps)
        .map(|_| rng::normal_tensor(&mut rng, &latent_shape(&cfg, batch)))
        .collect();
    let mix = Tensor::from_fn(frame_shape.to_vec(), |i| if i < frame_shape[1..].iter().product() { 1.0 } else { 0.0 });

    grad_check_with(
        |tape, vars| {
            let mut bound = Bound::default();
            for (name, &v) in names.iter().zip(vars) {
                bound.insert(name.clone(), v);
            }
            let truth: Vec<_> = frames.iter().map(|f| tape.constant(f.clone())).collect();
            let acts: Vec<_> = actions.iter().map(|a| tape.constant(a.clone())).collect();
            let stacked = tape.constant(stacked.clone());
            let post = infer_posterior(tape, &bound, &cfg, stacked).map_err(to_ad)?;
            let latents = noise
                .iter()
                .map(|n| sample_latent(tape, post, n.clone()))
                .collect::<Result<Vec<_>>>()
                .map_err(to_ad)?;
            let kl = kl_to_standard_normal(tape, post).map_err(to_ad)?;
            let maps = vec![tape.constant(mix.clone()); steps - 1];
            let inputs = RolloutInputs {
                truth: &truth,
                latents: &latents,
                actions: Some(&acts),
                feed: Feed::Scheduled(maps),
            };
            let preds = rollout(tape, &bound, &cfg, &inputs).map_err(to_ad)?;
            let recon = reconstruction_loss(tape, &preds, &truth[cfg.context..]).map_err(to_ad)?;
            elbo_loss(tape, recon, Some(kl), 0.5).map_err(to_ad)
        },
        &inputs,
        tolerance,
        opts,
    )
    .map_err(Into::into)
}

fn to_ad(e: crate::Error) -> sv2p_autodiff::AutodiffError {
    match e {
        crate::Error::Autodiff(e) => e,
        other => sv2p_autodiff::AutodiffError::Invalid {
            op: "network",
            detail: other.to_string(),
        },
    }
}
