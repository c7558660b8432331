//! Conv-LSTM generator with motion kernels and compositing masks.
//!
//! One step maps the previous frame to the next: a strided conv-LSTM encoder
//! reaches the bottleneck, where the latent map and tiled action join as
//! extra channels. A dense head predicts `M` normalized `k×k` kernels; a
//! decoder with skip connections predicts `M + 2` softmax masks and a
//! directly synthesized image. The output mixes the kernel-transformed
//! previous frames, the previous frame itself and the synthesized image.

use sv2p_autodiff::{conv_lstm_cell, Bound, ConvLstmParams, Padding, Real, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{invalid, Result};

/// Recurrent state: hidden and cell tensors per encoder level.
#[derive(Clone, Debug)]
pub struct GenState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

/// Everything one step produced besides the frame.
#[derive(Clone, Copy, Debug)]
pub struct CdnaOutputs {
    /// `[B, M, k, k]`, each kernel nonnegative with unit sum.
    pub kernels: Var,
    /// `[B, H, W, M + 2]`: kernels, then the static frame, then synthesis.
    pub masks: Var,
    /// `[B, H, W, 3]` in `(0, 1)`.
    pub synthesized: Var,
}

pub fn initial_state<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, batch: usize) -> GenState {
    let mut hidden = Vec::new();
    let mut cell = Vec::new();
    for (l, &ch) in config.enc_channels.iter().enumerate() {
        let s = config.resolution >> (l + 1);
        hidden.push(tape.constant(Tensor::zeros([batch, s, s, ch])));
        cell.push(tape.constant(Tensor::zeros([batch, s, s, ch])));
    }
    GenState { hidden, cell }
}

/// Softmax over each kernel's `k²` logits: `[B, M·k²]` → `[B, M, k, k]`.
pub fn normalize_kernels<T: Real>(tape: &mut Tape<T>, logits: Var, masks: usize, k: usize) -> Result<Var> {
    let b = tape.shape(logits)[0];
    let flat = tape.reshape(logits, &[b, masks, k * k])?;
    let soft = tape.softmax(flat)?;
    Ok(tape.reshape(soft, &[b, masks, k, k])?)
}

/// `[B, H, W, M, C]` candidates from depthwise, replicate-padded kernels.
pub fn apply_kernels<T: Real>(tape: &mut Tape<T>, frame: Var, kernels: Var) -> Result<Var> {
    Ok(tape.depthwise_kernels(frame, kernels)?)
}

/// Per-pixel convex combination of candidates, previous frame and synthesis.
pub fn composite<T: Real>(
    tape: &mut Tape<T>,
    candidates: Var,
    prev: Var,
    synthesized: Var,
    masks: Var,
) -> Result<Var> {
    let cs = tape.shape(candidates).to_vec();
    let [b, h, w, m, c] = cs[..] else {
        return invalid(format!("candidates must be [B,H,W,M,C], got {cs:?}"));
    };
    if tape.shape(masks) != [b, h, w, m + 2] {
        return invalid(format!(
            "masks {:?} must have M + 2 = {} channels to match candidates {cs:?}",
            tape.shape(masks),
            m + 2
        ));
    }
    let p = tape.reshape(prev, &[b, h, w, 1, c])?;
    let s = tape.reshape(synthesized, &[b, h, w, 1, c])?;
    let layers = tape.concat(&[candidates, p, s], 3)?;
    Ok(tape.mask_composite(layers, masks)?)
}

fn conv<T: Real>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = tape.conv2d(x, bound.get(&format!("{name}/k"))?, stride, Padding::SameZero)?;
    Ok(tape.add_bias(y, bound.get(&format!("{name}/b"))?)?)
}

fn norm_relu<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, x: Var) -> Result<Var> {
    let x = if config.instance_norm { tape.instance_norm(x, T::lit(1e-5))? } else { x };
    Ok(tape.relu(x))
}

/// One generator step.
///
/// `latent` is `[B, 8, 8, C_z]`; `action` is `[B, 2]` and required exactly
/// when the model is action-conditioned.
pub fn predict_next_frame<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    prev: Var,
    latent: Var,
    action: Option<Var>,
    state: &GenState,
) -> Result<(Var, CdnaOutputs, GenState)> {
    let (b, r) = (tape.shape(prev)[0], config.resolution);
    if tape.shape(prev) != [b, r, r, 3] {
        return invalid(format!("previous frame must be [B, {r}, {r}, 3], got {:?}", tape.shape(prev)));
    }
    if config.actions != action.is_some() {
        return invalid(if config.actions {
            "this model is action-conditioned; an action is required for every step"
        } else {
            "this model takes no actions"
        });
    }

    let mut x = prev;
    let mut next_state = GenState {
        hidden: Vec::new(),
        cell: Vec::new(),
    };
    for l in 0..config.enc_channels.len() {
        let down = conv(tape, bound, &format!("gen/enc{l}"), x, 2)?;
        let down = norm_relu(tape, config, down)?;
        let params = ConvLstmParams {
            kernel: bound.get(&format!("gen/lstm{l}/k"))?,
            bias: bound.get(&format!("gen/lstm{l}/b"))?,
        };
        let (h, c) = conv_lstm_cell(tape, down, state.hidden[l], state.cell[l], params)?;
        next_state.hidden.push(h);
        next_state.cell.push(c);
        x = h;
    }

    let s = config.bottleneck_size();
    let mut parts = vec![x];
    let z = if s == tape.shape(latent)[1] { latent } else { tape.resize_nearest(latent, s, s)? };
    parts.push(z);
    if let Some(a) = action {
        parts.push(tape.tile_spatial(a, s, s)?);
    }
    let joined = tape.concat_channels(&parts)?;
    let bott = conv(tape, bound, "gen/bott", joined, 1)?;
    let bott = tape.relu(bott);

    let width = *config.enc_channels.last().unwrap();
    let flat = tape.reshape(bott, &[b, s * s * width])?;
    let logits = tape.matmul(flat, bound.get("gen/kern/w")?)?;
    let logits = tape.add_bias(logits, bound.get("gen/kern/b")?)?;
    let kernels = normalize_kernels(tape, logits, config.masks, config.kernel_size)?;

    let mut y = bott;
    for l in (0..config.enc_channels.len()).rev() {
        y = tape.upsample_nearest(y, 2)?;
        if config.skip_connections {
            let skip = if l == 0 { prev } else { next_state.hidden[l - 1] };
            y = tape.concat_channels(&[y, skip])?;
        }
        y = conv(tape, bound, &format!("gen/dec{l}"), y, 1)?;
        y = norm_relu(tape, config, y)?;
    }
    let mask_logits = conv(tape, bound, "gen/mask", y, 1)?;
    let masks = tape.softmax_channels(mask_logits)?;
    let synth = conv(tape, bound, "gen/synth", y, 1)?;
    let synthesized = tape.sigmoid(synth);

    let candidates = apply_kernels(tape, prev, kernels)?;
    let next = composite(tape, candidates, prev, synthesized, masks)?;
    Ok((
        next,
        CdnaOutputs {
            kernels,
            masks,
            synthesized,
        },
        next_state,
    ))
}

/// Which frame feeds each step after the context.
#[derive(Clone, Debug)]
pub enum Feed {
    /// Always the model's own previous prediction.
    Own,
    /// Per step, a constant `[B, H, W, 3]` 0/1 map choosing ground truth (1)
    /// or the model's prediction (0), per video. One entry per step after
    /// the first predicted frame.
    Scheduled(Vec<Var>),
}

/// Inputs to a multi-step rollout. `truth` holds at least the context frames
/// and, for scheduled feeding, every frame up to the horizon.
pub struct RolloutInputs<'a> {
    pub truth: &'a [Var],
    /// One latent per predicted frame.
    pub latents: &'a [Var],
    /// `actions[t]` conditions the step that predicts frame `t + 1`.
    pub actions: Option<&'a [Var]>,
    pub feed: Feed,
}

/// Predicts frames `c..c + latents.len()` given `c` context frames.
pub fn rollout<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    inputs: &RolloutInputs,
) -> Result<Vec<Var>> {
    let c = config.context;
    let horizon = inputs.latents.len();
    if inputs.truth.len() < c {
        return invalid(format!("rollout needs {c} context frames, got {}", inputs.truth.len()));
    }
    if horizon == 0 {
        return Ok(Vec::new());
    }
    if let Some(a) = inputs.actions {
        if a.len() < c + horizon - 1 {
            return invalid(format!(
                "predicting to frame {} needs {} actions, only {} available",
                c + horizon - 1,
                c + horizon - 1,
                a.len()
            ));
        }
    }
    if let Feed::Scheduled(m) = &inputs.feed {
        if m.len() + 1 < horizon || inputs.truth.len() < c + horizon - 1 {
            return invalid("scheduled feeding needs ground truth and a choice map for every step");
        }
    }
    let b = tape.shape(inputs.truth[0])[0];
    let mut state = initial_state(tape, config, b);
    let mut preds = Vec::with_capacity(horizon);
    let mut prev_pred = None;
    for t in 1..c + horizon {
        let input = if t - 1 < c {
            inputs.truth[t - 1]
        } else {
            let own = prev_pred.expect("a prediction exists after the context");
            match &inputs.feed {
                Feed::Own => own,
                Feed::Scheduled(maps) => {
                    let m = maps[t - 1 - c];
                    let diff = tape.sub(inputs.truth[t - 1], own)?;
                    let picked = tape.mul(m, diff)?;
                    tape.add(own, picked)?
                }
            }
        };
        let latent = inputs.latents[t.saturating_sub(c)];
        let action = inputs.actions.map(|a| a[t - 1]);
        let (next, _, s) = predict_next_frame(tape, bound, config, input, latent, action, &state)?;
        state = s;
        prev_pred = Some(next);
        if t >= c {
            preds.push(next);
        }
    }
    Ok(preds)
}

/// Ground-truth probability of scheduled sampling at a global iteration:
/// `k / (k + exp(i / k))`.
pub fn teacher_probability(iteration: u64, k: f64) -> f64 {
    let e = (iteration as f64 / k).exp();
    if e.is_infinite() {
        0.0
    } else {
        k / (k + e)
    }
}
