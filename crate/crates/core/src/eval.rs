//! Rollouts from trained checkpoints and the best-of-N protocol.

use std::fmt::Write as _;
use std::ops::Range;

use sv2p_autodiff::{par, Bound, Exec, ParamSet, Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::dataset::{classify_pair, Dataset, MotionVerdict, VideoSequence, ACTION_DIM, DEFAULT_AMBIGUITY_RATIO};
use crate::error::{invalid, Error, Result};
use crate::generator::{predict_next_frame, GenState};
use crate::inference::{infer_posterior, latent_plan, latent_shape, stack_frames};
use crate::metrics::{argmax_first, mean_ci, psnr, ssim, FrameScore, MeanCi};
use crate::model::{GEN_PREFIX, INF_PREFIX};
use crate::rng::{self, Domain};

pub const REPORT_HEADER: &str = "method,frame,psnr_mean,psnr_ci,ssim_mean,ssim_ci,n_samples,extrapolated";

/// Rollouts per forward batch when drawing many samples of one video.
const SAMPLE_CHUNK: usize = 20;

/// Forward-only view of a trained model.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub model: ModelConfig,
    pub params: ParamSet<f32>,
    /// Feed the prior mean (zero) instead of random latents.
    pub deterministic: bool,
    pub exec: Exec,
}

/// Where rollout latents come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LatentChoice {
    /// Standard-normal draws (zero for deterministic predictors).
    Prior,
    /// The posterior mean of the full video (noise = 0).
    PosteriorMean,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            model: ckpt.model.clone(),
            params: ckpt.params.clone(),
            deterministic: ckpt.is_deterministic(),
            exec: Exec::default(),
        }
    }

    /// Predicts `latents.len()` frames after the context frames. Context is
    /// `c` tensors `[B, H, W, 3]`; actions, when the model takes them, are
    /// `[B, 2]` per frame. Each step runs on its own tape.
    pub fn rollout(
        &self,
        context: &[Tensor<f32>],
        actions: Option<&[Tensor<f32>]>,
        latents: &[Tensor<f32>],
    ) -> Result<Vec<Tensor<f32>>> {
        let cfg = &self.model;
        let c = cfg.context;
        if context.len() != c {
            return invalid(format!("expected {c} context frames, got {}", context.len()));
        }
        let horizon = latents.len();
        if let Some(a) = actions {
            if a.len() + 1 < c + horizon {
                return invalid(format!(
                    "predicting {horizon} frames needs {} actions, {} available",
                    c + horizon - 1,
                    a.len()
                ));
            }
        } else if cfg.actions {
            return invalid("this model is action-conditioned; actions are required");
        }
        let b = context[0].shape()[0];
        let mut hidden: Vec<Tensor<f32>> = Vec::new();
        let mut cell: Vec<Tensor<f32>> = Vec::new();
        for (l, &ch) in cfg.enc_channels.iter().enumerate() {
            let s = cfg.resolution >> (l + 1);
            hidden.push(Tensor::zeros([b, s, s, ch]));
            cell.push(Tensor::zeros([b, s, s, ch]));
        }
        let mut out = Vec::with_capacity(horizon);
        let mut prev: Option<Tensor<f32>> = None;
        for t in 1..c + horizon {
            let mut tape = Tape::with_exec(self.exec);
            let mut bound = Bound::default();
            bound.bind(&mut tape, &self.params, GEN_PREFIX, false);
            let input = match &prev {
                Some(p) if t - 1 >= c => p.clone(),
                _ => context[t - 1].clone(),
            };
            let input = tape.constant(input);
            let z = tape.constant(latents[t.saturating_sub(c)].clone());
            let action = actions.map(|a| tape.constant(a[t - 1].clone()));
            let state = GenState {
                hidden: hidden.iter().map(|h| tape.constant(h.clone())).collect(),
                cell: cell.iter().map(|h| tape.constant(h.clone())).collect(),
            };
            let (next, _, s) = predict_next_frame(&mut tape, &bound, cfg, input, z, action, &state)?;
            hidden = s.hidden.iter().map(|&v| tape.tensor(v)).collect();
            cell = s.cell.iter().map(|&v| tape.tensor(v)).collect();
            let next = tape.tensor(next);
            if t >= c {
                out.push(next.clone());
            }
            prev = Some(next);
        }
        Ok(out)
    }

    /// Posterior `(mu, log_sigma)` for full-length videos.
    pub fn posterior(&self, videos: &[&VideoSequence]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::with_exec(self.exec);
        let mut bound = Bound::default();
        bound.bind(&mut tape, &self.params, INF_PREFIX, false);
        let stacked = tape.constant(stack_frames(videos, self.model.frames)?);
        let post = infer_posterior(&mut tape, &bound, &self.model, stacked)?;
        Ok((tape.tensor(post.mu), tape.tensor(post.log_sigma)))
    }

    fn context_of(&self, video: &VideoSequence, copies: usize) -> Vec<Tensor<f32>> {
        let (h, w, ch) = (video.height, video.width, video.channels);
        (0..self.model.context)
            .map(|t| Tensor::new(vec![copies, h, w, ch], video.frame(t).repeat(copies)).unwrap())
            .collect()
    }

    fn actions_of(&self, video: &VideoSequence, copies: usize, frames: usize) -> Result<Option<Vec<Tensor<f32>>>> {
        if !self.model.actions {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let Some(a) = video.action(t) else {
                return invalid("the model is action-conditioned but the video has no actions");
            };
            out.push(Tensor::new(vec![copies, ACTION_DIM], a.repeat(copies))?);
        }
        Ok(Some(out))
    }

    /// Rollouts of one video for the given sample indices.
    ///
    /// Sample `s` draws its latents from its own stream, so the first `n`
    /// samples are the same whatever the total count. Returns
    /// `[sample][step]` frames.
    pub fn sample_rollouts(
        &self,
        video: &VideoSequence,
        samples: Range<u64>,
        horizon: usize,
        seed: u64,
        choice: LatentChoice,
    ) -> Result<Vec<Vec<Vec<f32>>>> {
        let c = self.model.context;
        if video.frames < c {
            return invalid(format!("video has {} frames, the model needs {c} context frames", video.frames));
        }
        let n = (samples.end - samples.start) as usize;
        if n == 0 {
            return Ok(Vec::new());
        }
        let zshape = latent_shape(&self.model, 1);
        let mut out = Vec::with_capacity(n);
        if self.deterministic && choice == LatentChoice::Prior {
            let z = vec![Tensor::zeros(zshape.to_vec()); horizon];
            let frames = self.rollout(&self.context_of(video, 1), self.actions_of(video, 1, c + horizon - 1)?.as_deref(), &z)?;
            let one: Vec<Vec<f32>> = frames.into_iter().map(|t| t.into_data()).collect();
            return Ok(vec![one; n]);
        }
        let mean = match choice {
            LatentChoice::PosteriorMean => Some(self.posterior(&[video])?.0),
            LatentChoice::Prior => None,
        };
        let ids: Vec<u64> = samples.collect();
        for chunk in ids.chunks(SAMPLE_CHUNK) {
            let b = chunk.len();
            let mut per_step: Vec<Vec<f32>> = vec![Vec::new(); horizon];
            for &s in chunk {
                let draws: Vec<Tensor<f32>> = match &mean {
                    Some(mu) => vec![mu.clone(); horizon],
                    None => {
                        let mut r = sample_stream(seed, s);
                        latent_plan(self.model.latent_mode, horizon, &zshape, &mut r)
                    }
                };
                for (dst, z) in per_step.iter_mut().zip(draws) {
                    dst.extend_from_slice(z.data());
                }
            }
            let mut zshape_b = zshape.to_vec();
            zshape_b[0] = b;
            let latents: Vec<Tensor<f32>> = per_step
                .into_iter()
                .map(|d| Tensor::new(zshape_b.clone(), d))
                .collect::<std::result::Result<_, _>>()?;
            let actions = self.actions_of(video, b, c + horizon - 1)?;
            let frames = self.rollout(&self.context_of(video, b), actions.as_deref(), &latents)?;
            let flen = video.frame_len();
            for i in 0..b {
                out.push(frames.iter().map(|t| t.data()[i * flen..(i + 1) * flen].to_vec()).collect());
            }
        }
        Ok(out)
    }
}

/// Latent stream of sample `s` under evaluation seed `seed`.
pub fn sample_stream(seed: u64, s: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, Domain::Sample, s)
}

/// Every predicted frame equals the last context frame.
pub fn repeat_baseline(context: &[&[f32]], horizon: usize) -> Result<Vec<Vec<f32>>> {
    let Some(last) = context.last() else {
        return invalid("the repeat baseline needs at least one context frame");
    };
    Ok(vec![last.to_vec(); horizon])
}

/// Per-frame scores of predictions for frames `c..c + horizon` of `video`.
pub fn score_frames(video: &VideoSequence, context: usize, predicted: &[Vec<f32>]) -> Vec<FrameScore> {
    predicted
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = context + i;
            let truth = video.frame(t);
            FrameScore {
                frame: t,
                psnr: psnr(p, truth, 1.0),
                ssim: ssim(p, truth, video.height, video.width, video.channels),
            }
        })
        .collect()
}

fn mean_psnr(video: &VideoSequence, context: usize, predicted: &[Vec<f32>]) -> f64 {
    let n = predicted.len().max(1) as f64;
    predicted
        .iter()
        .enumerate()
        .map(|(i, p)| psnr(p, video.frame(context + i), 1.0))
        .sum::<f64>()
        / n
}

/// Outcome of best-of-N on one video.
#[derive(Clone, Debug, PartialEq)]
pub struct BestOfN {
    /// Mean PSNR over the horizon for every sample, in sample order.
    pub sample_psnr: Vec<f64>,
    pub best: usize,
    pub worst: usize,
    pub scores: Vec<FrameScore>,
    pub best_frames: Vec<Vec<f32>>,
}

/// Draws `n` prior rollouts of `video` and keeps the one with the highest
/// mean PSNR (lowest index on ties).
pub fn best_of_n(pred: &Predictor, video: &VideoSequence, n: usize, horizon: usize, seed: u64) -> Result<BestOfN> {
    if n == 0 {
        return invalid("best-of-n needs n ≥ 1");
    }
    let c = pred.model.context;
    if video.frames < c + horizon {
        return invalid(format!(
            "scoring {horizon} predicted frames needs {} frames, the video has {}",
            c + horizon,
            video.frames
        ));
    }
    let mut sample_psnr = Vec::with_capacity(n);
    let mut best_frames = Vec::new();
    let mut best_score = f64::NEG_INFINITY;
    let mut start = 0u64;
    while (start as usize) < n {
        let end = (start + SAMPLE_CHUNK as u64).min(n as u64);
        let rollouts = pred.sample_rollouts(video, start..end, horizon, seed, LatentChoice::Prior)?;
        for r in rollouts {
            let m = mean_psnr(video, c, &r);
            if m > best_score {
                best_score = m;
                best_frames = r;
            }
            sample_psnr.push(m);
        }
        start = end;
    }
    let best = argmax_first(&sample_psnr).unwrap_or(0);
    let worst = sample_psnr
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map_or(0, |(i, _)| i);
    let scores = score_frames(video, c, &best_frames);
    Ok(BestOfN {
        sample_psnr,
        best,
        worst,
        scores,
        best_frames,
    })
}

/// Fails when the two seed ranges share a video.
pub fn check_disjoint(train: &Range<u64>, test: &Range<u64>) -> Result<()> {
    if train.start < test.end && test.start < train.end {
        return Err(Error::Invalid(format!(
            "test videos (seeds {}..{}) overlap the training videos (seeds {}..{})",
            test.start, test.end, train.start, train.end
        )));
    }
    Ok(())
}

pub enum MethodKind {
    Model(Box<Predictor>),
    Repeat,
}

pub struct Method {
    pub name: String,
    pub kind: MethodKind,
    /// Frames the method was trained to predict (context included); later
    /// frames are extrapolation.
    pub trained_frames: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Protocol {
    pub n: usize,
    /// Predicted frames per video.
    pub horizon: usize,
    pub context: usize,
    pub seed: u64,
    pub exec: Exec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub frame: usize,
    pub psnr: MeanCi,
    pub ssim: MeanCi,
    pub n_samples: usize,
    pub extrapolated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub name: String,
    /// Per video: scores of the selected rollout.
    pub scores: Vec<Vec<FrameScore>>,
    /// Per video: index of the selected sample.
    pub best: Vec<usize>,
    /// Per video: mean PSNR of every sample.
    pub sample_psnr: Vec<Vec<f64>>,
}

impl MethodResult {
    /// Mean over videos of the per-video mean PSNR.
    pub fn mean_psnr(&self) -> f64 {
        let per: Vec<f64> = self
            .scores
            .iter()
            .map(|s| s.iter().map(|f| f.psnr).sum::<f64>() / s.len().max(1) as f64)
            .collect();
        per.iter().sum::<f64>() / per.len().max(1) as f64
    }

    /// Mean PSNR when only the first `k` samples compete.
    pub fn mean_best_of(&self, k: usize) -> f64 {
        let per: Vec<f64> = self
            .sample_psnr
            .iter()
            .map(|s| s[..k.min(s.len())].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        per.iter().sum::<f64>() / per.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub methods: Vec<MethodResult>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.method, r.frame, r.psnr.mean, r.psnr.ci, r.ssim.mean, r.ssim.ci, r.n_samples, r.extrapolated
            )
            .unwrap();
        }
        s
    }
}

/// Scores every method on every test video: best-of-N for models, the
/// repeat baseline as is. Rows are per method and predicted frame.
pub fn evaluate_suite(methods: &[Method], test: &Dataset, protocol: &Protocol) -> Result<EvalReport> {
    let Protocol {
        n,
        horizon,
        context,
        seed,
        exec,
    } = *protocol;
    if test.is_empty() {
        return invalid("the test set is empty");
    }
    if (test.header.frames as usize) < context + horizon {
        return invalid(format!(
            "horizon {horizon} after {context} context frames needs {} frames per test video, the set has {}",
            context + horizon,
            test.header.frames
        ));
    }
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for m in methods {
        let per_video: Vec<Result<(Vec<FrameScore>, usize, Vec<f64>)>> =
            par::map_indexed(exec, test.len(), |i| {
                let video = &test.videos[i];
                let video_seed = seed ^ test.header.first_seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                match &m.kind {
                    MethodKind::Repeat => {
                        let ctx: Vec<&[f32]> = (0..context).map(|t| video.frame(t)).collect();
                        let p = repeat_baseline(&ctx, horizon)?;
                        let s = score_frames(video, context, &p);
                        let mean = s.iter().map(|f| f.psnr).sum::<f64>() / s.len() as f64;
                        Ok((s, 0, vec![mean]))
                    }
                    MethodKind::Model(p) => {
                        let mut p = (**p).clone();
                        p.exec = Exec::Sequential;
                        let b = best_of_n(&p, video, n, horizon, video_seed)?;
                        Ok((b.scores, b.best, b.sample_psnr))
                    }
                }
            });
        let mut scores = Vec::with_capacity(test.len());
        let mut best = Vec::with_capacity(test.len());
        let mut sample_psnr = Vec::with_capacity(test.len());
        for r in per_video {
            let (s, b, sp) = r?;
            scores.push(s);
            best.push(b);
            sample_psnr.push(sp);
        }
        let n_samples = match m.kind {
            MethodKind::Repeat => 1,
            MethodKind::Model(_) => n,
        };
        for step in 0..horizon {
            let p: Vec<f64> = scores.iter().map(|s| s[step].psnr).collect();
            let q: Vec<f64> = scores.iter().map(|s| s[step].ssim).collect();
            let frame = context + step;
            rows.push(EvalRow {
                method: m.name.clone(),
                frame,
                psnr: mean_ci(&p),
                ssim: mean_ci(&q),
                n_samples,
                extrapolated: frame >= m.trained_frames,
            });
        }
        results.push(MethodResult {
            name: m.name.clone(),
            scores,
            best,
            sample_psnr,
        });
    }
    Ok(EvalReport { rows, methods: results })
}

/// Mean PSNR over the training horizon of rollouts conditioned on the
/// posterior mean, per video.
pub fn posterior_psnr(pred: &Predictor, videos: &[VideoSequence], exec: Exec) -> Result<Vec<f64>> {
    let horizon = pred.model.frames - pred.model.context;
    par::map_indexed(exec, videos.len(), |i| {
        let mut p = pred.clone();
        p.exec = Exec::Sequential;
        let r = p.sample_rollouts(&videos[i], 0..1, horizon, 0, LatentChoice::PosteriorMean)?;
        Ok(mean_psnr(&videos[i], p.model.context, &r[0]))
    })
    .into_iter()
    .collect()
}

/// Classifies the first predicted frame of one prior rollout per video.
pub fn motion_verdicts(pred: &Predictor, videos: &[VideoSequence], displacement: u32, seed: u64, exec: Exec) -> Result<Vec<MotionVerdict>> {
    let c = pred.model.context;
    par::map_indexed(exec, videos.len(), |i| {
        let mut p = pred.clone();
        p.exec = Exec::Sequential;
        let v = &videos[i];
        let r = p.sample_rollouts(v, 0..1, 1, seed.wrapping_add(i as u64), LatentChoice::Prior)?;
        Ok(classify_pair(
            v.frame(c - 1),
            &r[0][0],
            v.height,
            v.width,
            v.channels,
            displacement,
            DEFAULT_AMBIGUITY_RATIO,
        ))
    })
    .into_iter()
    .collect()
}

/// Whether the rollouts of a model respond to its latent at all: the mean
/// absolute difference between rollouts under two prior draws.
pub fn latent_sensitivity(pred: &Predictor, video: &VideoSequence, seed: u64) -> Result<f64> {
    let horizon = pred.model.frames - pred.model.context;
    let r = pred.sample_rollouts(video, 0..2, horizon, seed, LatentChoice::Prior)?;
    let (a, b): (Vec<f32>, Vec<f32>) = (r[0].concat(), r[1].concat());
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64)
}

/// Rows of a qualitative comparison for one video, each holding the
/// predicted frames after the context: the deterministic model (when
/// given), the posterior mean, the best and worst of `n` prior samples,
/// and two further prior samples outside the `n` that competed.
pub fn comparison_rows(
    pred: &Predictor,
    deterministic: Option<&Predictor>,
    video: &VideoSequence,
    n: usize,
    seed: u64,
) -> Result<Vec<(&'static str, Vec<Vec<f32>>)>> {
    if n < 2 {
        return invalid("the comparison needs at least 2 prior samples");
    }
    let horizon = video.frames.saturating_sub(pred.model.context);
    let mut rows = Vec::new();
    if let Some(d) = deterministic {
        if d.model.context != pred.model.context {
            return invalid("both models must use the same number of context frames");
        }
        let r = d.sample_rollouts(video, 0..1, horizon, seed, LatentChoice::Prior)?;
        rows.push(("deterministic", r.into_iter().next().unwrap_or_default()));
    }
    let post = pred.sample_rollouts(video, 0..1, horizon, seed, LatentChoice::PosteriorMean)?;
    rows.push(("posterior", post.into_iter().next().unwrap_or_default()));
    let b = best_of_n(pred, video, n, horizon, seed)?;
    let pick = |i: usize| -> Result<Vec<Vec<f32>>> {
        let r = pred.sample_rollouts(video, i as u64..i as u64 + 1, horizon, seed, LatentChoice::Prior)?;
        Ok(r.into_iter().next().unwrap_or_default())
    };
    rows.push(("best", pick(b.best)?));
    rows.push(("worst", pick(b.worst)?));
    rows.push(("random", pick(n)?));
    rows.push(("random", pick(n + 1)?));
    Ok(rows)
}
