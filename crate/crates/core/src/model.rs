//! Parameter layout and initialization for both networks.

use rand_chacha::ChaCha8Rng;
use sv2p_autodiff::{ParamSet, Real, Tensor};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::rng::{self, Domain};

pub const GEN_PREFIX: &str = "gen/";
pub const INF_PREFIX: &str = "inf/";

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled(f64),
    /// Conv-LSTM bias: zeros with the forget gate at 1.
    ForgetBias,
}

/// `(name, shape, init)` for every parameter, in a fixed order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let relu = Init::Scaled(2f64.sqrt());
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut conv = |name: String, k: usize, cin: usize, cout: usize, init: Init| {
        out.push((format!("{name}/k"), vec![k, k, cin, cout], init));
        out.push((format!("{name}/b"), vec![cout], Init::Zeros));
    };

    let enc = &config.enc_channels;
    let mut cin = 3;
    for (l, &ch) in enc.iter().enumerate() {
        conv(format!("gen/enc{l}"), 3, cin, ch, relu);
        conv(format!("gen/lstm{l}"), 3, 2 * ch, 4 * ch, Init::Scaled(1.0));
        cin = ch;
    }
    let width = *enc.last().unwrap();
    let action_dim = if config.actions { crate::dataset::ACTION_DIM } else { 0 };
    conv("gen/bott".into(), 1, width + config.latent_channels + action_dim, width, relu);
    for l in (0..enc.len()).rev() {
        let from = if l + 1 == enc.len() { width } else { dec_width(config, l + 1) };
        let skip = match (config.skip_connections, l) {
            (false, _) => 0,
            (true, 0) => 3,
            (true, l) => enc[l - 1],
        };
        conv(format!("gen/dec{l}"), 3, from + skip, dec_width(config, l), relu);
    }
    let top = dec_width(config, 0);
    conv("gen/mask".into(), 1, top, config.masks + 2, Init::Scaled(1.0));
    conv("gen/synth".into(), 1, top, 3, Init::Scaled(1.0));

    let s = config.bottleneck_size();
    let kk = config.kernel_size * config.kernel_size;
    let mut out = out;
    out.push(("gen/kern/w".into(), vec![s * s * width, config.masks * kk], Init::Scaled(0.1)));
    out.push(("gen/kern/b".into(), vec![config.masks * kk], Init::Zeros));

    let mut cin = config.frames * 3;
    for i in 0..config.inference_stages() {
        let ch = config.inf_channels[i];
        out.push((format!("inf/s{i}/k"), vec![3, 3, cin, ch], relu));
        out.push((format!("inf/s{i}/b"), vec![ch], Init::Zeros));
        cin = ch;
    }
    for head in ["mu", "ls"] {
        out.push((format!("inf/{head}/k"), vec![1, 1, cin, config.latent_channels], Init::Zeros));
        out.push((format!("inf/{head}/b"), vec![config.latent_channels], Init::Zeros));
    }
    out
}

/// Output width of decoder level `l`.
fn dec_width(config: &ModelConfig, l: usize) -> usize {
    config.enc_channels[l.saturating_sub(1)]
}

fn draw<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Scaled(gain) => {
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let std = gain / (fan_in.max(1) as f64).sqrt();
            let mut t = rng::normal_tensor::<T>(rng, shape);
            for v in t.data_mut() {
                *v *= T::lit(std);
            }
            t
        }
        Init::ForgetBias => unreachable!("handled by the caller"),
    }
}

/// Freshly initialized generator and inference parameters.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut rng = rng::stream(seed, Domain::Init, 0);
    let mut params = ParamSet::new();
    for (name, shape, init) in layout(config) {
        let init = if name.starts_with("gen/lstm") && name.ends_with("/b") { Init::ForgetBias } else { init };
        let t = match init {
            Init::ForgetBias => {
                let ch = shape[0] / 4;
                Tensor::from_fn(shape.clone(), |i| if (ch..2 * ch).contains(&i) { T::one() } else { T::zero() })
            }
            other => draw(&mut rng, &shape, other),
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Expected `(name, shape)` pairs; used to validate loaded checkpoints.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let p = init_params::<f32>(&ModelConfig::default(), 3).unwrap();
        let b = p.get("gen/lstm0/b").unwrap().data();
        assert_eq!(&b[..16], &[0.0; 16]);
        assert_eq!(&b[16..32], &[1.0; 16]);
        assert_eq!(&b[32..], &[0.0; 32]);
    }

    #[test]
    fn heads_start_at_zero_and_layout_matches() {
        let cfg = ModelConfig::default();
        let p = init_params::<f32>(&cfg, 3).unwrap();
        for head in ["inf/mu/k", "inf/ls/k", "inf/mu/b", "inf/ls/b"] {
            assert!(p.get(head).unwrap().data().iter().all(|&v| v == 0.0));
        }
        for (name, shape) in param_shapes(&cfg) {
            assert_eq!(p.get(&name).unwrap().shape(), shape.as_slice(), "{name}");
        }
        assert_eq!(p.len(), param_shapes(&cfg).len());
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params::<f32>(&cfg, 9).unwrap(), init_params::<f32>(&cfg, 9).unwrap());
    }
}
