//! ELBO objective and the three-phase training loop.
//!
//! Phase 1 trains the generator alone with latents from the prior. Phase 2
//! switches to posterior latents with no KL term, so the inference network
//! learns to carry information about the future. Phase 3 ramps the KL
//! weight linearly to its final value.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use sv2p_autodiff::{AdamConfig, AdamState, Bound, Exec, ParamSet, Real, Tape, Tensor, Var};

use crate::checkpoint::{Checkpoint, PhaseCursor};
use crate::config::{LatentMode, ModelConfig, RunConfig, TrainConfig};
use crate::dataset::{Dataset, VideoSequence, ACTION_DIM};
use crate::error::{invalid, io_err, Error, Result};
use crate::generator::{rollout, teacher_probability, Feed, RolloutInputs};
use crate::inference::{infer_posterior, latent_plan, latent_shape, sample_latent, stack_frames, Posterior};
use crate::model::{init_params, GEN_PREFIX, INF_PREFIX};
use crate::rng::{self, Domain, StreamState};

pub const CURVE_HEADER: &str = "iteration,phase,beta,recon,kl,total,wall_ms";

/// `Σ ½(μ² + σ² − 1 − 2 log σ)` over latent entries, divided by the batch size.
pub fn kl_to_standard_normal<T: Real>(tape: &mut Tape<T>, posterior: Posterior) -> Result<Var> {
    let shape = tape.shape(posterior.mu).to_vec();
    let (batch, n) = (shape[0], shape.iter().product::<usize>());
    let mu2 = tape.square(posterior.mu);
    let two_ls = tape.scale(posterior.log_sigma, T::lit(2.0));
    let var = tape.exp(two_ls);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_ls)?;
    let sum = tape.reduce_sum(b);
    let half = tape.scale(sum, T::lit(0.5 / batch as f64));
    Ok(tape.add_scalar(half, T::lit(-0.5 * n as f64 / batch as f64)))
}

/// Closed-form KL of one `N(mu, e^{2 log_sigma})` entry from `N(0, 1)`.
pub fn kl_entry(mu: f64, log_sigma: f64) -> f64 {
    0.5 * (mu * mu + (2.0 * log_sigma).exp() - 1.0 - 2.0 * log_sigma)
}

/// Mean squared error over pixels, frames and batch.
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, predicted: &[Var], target: &[Var]) -> Result<Var> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return invalid(format!(
            "{} predicted frames against {} targets",
            predicted.len(),
            target.len()
        ));
    }
    let p = tape.concat(predicted, 0)?;
    let t = tape.concat(target, 0)?;
    let d = tape.sub(p, t)?;
    let sq = tape.square(d);
    Ok(tape.reduce_mean(sq))
}

/// `total = recon + beta · kl`.
pub fn elbo_loss<T: Real>(tape: &mut Tape<T>, recon: Var, kl: Option<Var>, beta: f64) -> Result<Var> {
    match kl {
        Some(kl) if beta != 0.0 => {
            let w = tape.scale(kl, T::lit(beta));
            Ok(tape.add(recon, w)?)
        }
        _ => Ok(recon),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Naive single-phase training.
    Naive = 0,
    Prior = 1,
    Posterior = 2,
    Annealed = 3,
}

impl Phase {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => Phase::Naive,
            1 => Phase::Prior,
            2 => Phase::Posterior,
            3 => Phase::Annealed,
            _ => return Err(Error::Format(format!("unknown phase id {id}"))),
        })
    }

    pub fn uses_posterior(self) -> bool {
        self != Phase::Prior
    }
}

/// Iteration counts per phase and the β ramp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSchedule {
    pub phase1: u64,
    pub phase2: u64,
    pub phase3: u64,
    pub beta_start: f64,
    pub beta_final: f64,
    pub naive: bool,
}

impl PhaseSchedule {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            phase1: c.phase1,
            phase2: c.phase2,
            phase3: c.phase3,
            beta_start: c.beta_start,
            beta_final: c.beta_final,
            naive: c.naive,
        }
    }

    pub fn total(&self) -> u64 {
        self.phase1 + self.phase2 + self.phase3
    }

    pub fn phase(&self, i: u64) -> Phase {
        if self.naive {
            Phase::Naive
        } else if i < self.phase1 {
            Phase::Prior
        } else if i < self.phase1 + self.phase2 {
            Phase::Posterior
        } else {
            Phase::Annealed
        }
    }

    /// KL weight at 0-based iteration `i`. Step `j` of phase 3 uses
    /// `start + (final − start)·(j + 1)/n3`, reaching the final value on its
    /// last step.
    pub fn beta(&self, i: u64) -> f64 {
        match self.phase(i) {
            Phase::Naive => self.beta_final,
            Phase::Prior | Phase::Posterior => 0.0,
            Phase::Annealed => {
                let j = i - self.phase1 - self.phase2;
                let frac = ((j + 1) as f64 / self.phase3.max(1) as f64).min(1.0);
                self.beta_start + (self.beta_final - self.beta_start) * frac
            }
        }
    }
}

/// Losses of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub beta: f64,
    pub recon: f64,
    /// 0 when no posterior was used.
    pub kl: f64,
    pub total: f64,
    pub wall_ms: u64,
}

/// Stacks frame `t` of each video into `[B, H, W, C]`.
fn frame_batch<T: Real>(videos: &[&VideoSequence], t: usize) -> Result<Tensor<T>> {
    let v0 = videos[0];
    let data = videos
        .iter()
        .flat_map(|v| v.frame(t).iter().map(|&x| T::lit(x as f64)))
        .collect();
    Ok(Tensor::new(vec![videos.len(), v0.height, v0.width, v0.channels], data)?)
}

fn action_batch<T: Real>(videos: &[&VideoSequence], t: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(videos.len() * ACTION_DIM);
    for v in videos {
        let Some(a) = v.action(t) else {
            return invalid("the model is action-conditioned but the dataset has no actions");
        };
        data.extend(a.iter().map(|&x| T::lit(x as f64)));
    }
    Ok(Tensor::new(vec![videos.len(), ACTION_DIM], data)?)
}

/// Frame and action constants for a batch, `frames` long.
pub(crate) struct BatchVars {
    pub truth: Vec<Var>,
    pub actions: Option<Vec<Var>>,
}

pub(crate) fn load_batch<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    videos: &[&VideoSequence],
    frames: usize,
) -> Result<BatchVars> {
    let mut truth = Vec::with_capacity(frames);
    for t in 0..frames {
        truth.push(tape.constant(frame_batch(videos, t)?));
    }
    let actions = if config.actions {
        let mut a = Vec::with_capacity(frames);
        for t in 0..frames {
            a.push(tape.constant(action_batch(videos, t)?));
        }
        Some(a)
    } else {
        None
    };
    Ok(BatchVars { truth, actions })
}

/// Checks that `videos` can feed a model built for `config`.
pub fn check_videos(config: &ModelConfig, videos: &[VideoSequence], frames: usize) -> Result<()> {
    for (i, v) in videos.iter().enumerate() {
        if v.frames < frames {
            return invalid(format!("video {i} has {} frames; {frames} are required", v.frames));
        }
        if (v.height, v.width, v.channels) != (config.resolution, config.resolution, 3) {
            return invalid(format!(
                "video {i} is {}x{}x{}, the model expects {}x{1}x3",
                v.height, v.width, v.channels, config.resolution
            ));
        }
        if config.actions && v.actions.is_none() {
            return invalid("the model is action-conditioned but the dataset has no actions");
        }
    }
    Ok(())
}

/// One optimization step at 0-based `iteration`. Every random choice comes
/// from the stream `(seed, iteration)`, so a step can be replayed alone.
pub fn train_step(
    model: &ModelConfig,
    train: &TrainConfig,
    params: &mut ParamSet<f32>,
    adam: &mut AdamState<f32>,
    data: &[VideoSequence],
    iteration: u64,
    exec: Exec,
) -> Result<TrainRecord> {
    if data.is_empty() {
        return invalid("the training set is empty");
    }
    let schedule = PhaseSchedule::from_config(train);
    let phase = schedule.phase(iteration);
    let beta = schedule.beta(iteration);
    let mut rng = rng::stream(train.seed, Domain::Train, iteration);

    let batch: Vec<&VideoSequence> = (0..train.batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
    for v in &batch {
        if v.frames < model.frames {
            return invalid(format!(
                "training videos have {} frames but the model predicts up to frame {}",
                v.frames, model.frames
            ));
        }
    }

    let mut tape = Tape::with_exec(exec);
    let mut bound = Bound::default();
    bound.bind(&mut tape, params, GEN_PREFIX, true);
    let vars = load_batch(&mut tape, model, &batch, model.frames)?;
    let steps = model.frames - model.context;
    let shape = latent_shape(model, train.batch);
    let draws: Vec<Tensor<f32>> = latent_plan(model.latent_mode, steps, &shape, &mut rng);

    let (latents, kl) = if phase.uses_posterior() {
        bound.bind(&mut tape, params, INF_PREFIX, true);
        let stacked = tape.constant(stack_frames(&batch, model.frames)?);
        let post = infer_posterior(&mut tape, &bound, model, stacked)?;
        let latents = match model.latent_mode {
            LatentMode::TimeInvariant => {
                let z = sample_latent(&mut tape, post, draws[0].clone())?;
                vec![z; steps]
            }
            LatentMode::TimeVariant => draws
                .into_iter()
                .map(|n| sample_latent(&mut tape, post, n))
                .collect::<Result<_>>()?,
        };
        (latents, Some(kl_to_standard_normal(&mut tape, post)?))
    } else {
        let latents = match model.latent_mode {
            LatentMode::TimeInvariant => vec![tape.constant(draws[0].clone()); steps],
            LatentMode::TimeVariant => draws.into_iter().map(|z| tape.constant(z)).collect(),
        };
        (latents, None)
    };

    let eps = teacher_probability(iteration, train.ss_k);
    let (r, b) = (model.resolution, train.batch);
    let mut maps = Vec::with_capacity(steps.saturating_sub(1));
    for _ in 1..steps {
        let mut m = Tensor::<f32>::zeros([b, r, r, 3]);
        for chunk in m.data_mut().chunks_mut(r * r * 3) {
            if rng.random::<f64>() < eps {
                chunk.fill(1.0);
            }
        }
        maps.push(tape.constant(m));
    }

    let inputs = RolloutInputs {
        truth: &vars.truth,
        latents: &latents,
        actions: vars.actions.as_deref(),
        feed: Feed::Scheduled(maps),
    };
    let preds = rollout(&mut tape, &bound, model, &inputs)?;
    let targets = &vars.truth[model.context..model.frames];
    let recon = reconstruction_loss(&mut tape, &preds, targets)?;
    let total = elbo_loss(&mut tape, recon, kl, beta)?;
    tape.backward(total)?;
    let grads = bound.grads(&tape);
    adam.step(params, &grads)?;

    Ok(TrainRecord {
        iteration,
        phase,
        beta,
        recon: tape.scalar(recon) as f64,
        kl: kl.map_or(0.0, |k| tape.scalar(k) as f64),
        total: tape.scalar(total) as f64,
        wall_ms: 0,
    })
}

/// Interval means written as loss-curve rows.
#[derive(Default)]
struct CurveAccumulator {
    n: u64,
    recon: f64,
    kl: f64,
    total: f64,
}

impl CurveAccumulator {
    fn add(&mut self, r: &TrainRecord) {
        self.n += 1;
        self.recon += r.recon;
        self.kl += r.kl;
        self.total += r.total;
    }

    fn row(&mut self, last: &TrainRecord) -> String {
        let n = self.n.max(1) as f64;
        let row = format!(
            "{},{},{:e},{:e},{:e},{:e},{}",
            last.iteration + 1,
            last.phase.id(),
            last.beta,
            self.recon / n,
            self.kl / n,
            self.total / n,
            last.wall_ms
        );
        *self = Self::default();
        row
    }
}

/// In-memory trainer: parameters, optimizer and position in the schedule.
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    /// Next iteration to run.
    pub iteration: u64,
    pub data_seeds: std::ops::Range<u64>,
    pub exec: Exec,
    data: Vec<VideoSequence>,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig, dataset: &Dataset) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let params = init_params(&model, train.seed)?;
        let adam = AdamState::new(AdamConfig {
            learning_rate: train.learning_rate,
            ..AdamConfig::default()
        });
        Self::assemble(model, train, params, adam, 0, dataset)
    }

    /// Continues from `ckpt`. `expected`, when given, must describe the same architecture.
    pub fn resume(ckpt: Checkpoint, expected: Option<&ModelConfig>, dataset: &Dataset) -> Result<Self> {
        if let Some(m) = expected {
            ckpt.check_architecture(m)?;
        }
        let Checkpoint {
            model,
            train,
            params,
            adam,
            cursor,
            ..
        } = ckpt;
        Self::assemble(model, train, params, adam, cursor.iteration, dataset)
    }

    fn assemble(
        model: ModelConfig,
        train: TrainConfig,
        params: ParamSet<f32>,
        adam: AdamState<f32>,
        iteration: u64,
        dataset: &Dataset,
    ) -> Result<Self> {
        check_videos(&model, &dataset.videos, model.frames)?;
        if dataset.is_empty() {
            return invalid("the training set is empty");
        }
        Ok(Self {
            model,
            train,
            params,
            adam,
            iteration,
            data_seeds: dataset.header.seed_range(),
            exec: Exec::default(),
            data: dataset.videos.clone(),
        })
    }

    pub fn schedule(&self) -> PhaseSchedule {
        PhaseSchedule::from_config(&self.train)
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.train.total_iterations()
    }

    pub fn step(&mut self) -> Result<TrainRecord> {
        let r = train_step(
            &self.model,
            &self.train,
            &mut self.params,
            &mut self.adam,
            &self.data,
            self.iteration,
            self.exec,
        )?;
        self.iteration += 1;
        Ok(r)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let last = self.iteration.saturating_sub(1);
        let schedule = self.schedule();
        let rng = rng::stream(self.train.seed, Domain::Train, self.iteration);
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            cursor: PhaseCursor {
                iteration: self.iteration,
                phase: schedule.phase(last),
                beta: if self.iteration == 0 { 0.0 } else { schedule.beta(last) },
            },
            rng: StreamState::of(self.train.seed, Domain::Train, &rng),
            data_seeds: self.data_seeds.clone(),
        }
    }
}

/// Where a file-backed run writes.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub curves: Option<PathBuf>,
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub records: Vec<TrainRecord>,
}

/// Removes curve rows logged after the checkpoint a run resumes from, so an
/// interrupted run does not leave duplicate iterations behind.
fn drop_rows_after(path: &Path, iteration: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut kept = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|it| it <= iteration);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    if kept.len() != text.len() {
        fs::write(path, kept).map_err(io_err(path))?;
    }
    Ok(())
}

/// Runs the trainer to the end of its schedule, appending loss-curve rows
/// and writing periodic and final checkpoints.
pub fn run(mut trainer: Trainer, outputs: &TrainOutputs, mut progress: impl FnMut(&TrainRecord)) -> Result<TrainOutcome> {
    let mut curves = match &outputs.curves {
        Some(path) => {
            let fresh = trainer.iteration == 0 || !path.exists();
            if !fresh {
                drop_rows_after(path, trainer.iteration)?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)
                .map_err(io_err(path))?;
            if fresh {
                writeln!(f, "{CURVE_HEADER}").map_err(io_err(path))?;
            }
            Some((f, path.clone()))
        }
        None => None,
    };
    let start = Instant::now();
    let mut acc = CurveAccumulator::default();
    let mut records = Vec::new();
    let log_every = trainer.train.log_every;
    let ckpt_every = trainer.train.checkpoint_every;
    while !trainer.is_done() {
        let mut r = trainer.step()?;
        r.wall_ms = start.elapsed().as_millis() as u64;
        acc.add(&r);
        progress(&r);
        let done = trainer.iteration;
        if done % log_every == 0 || trainer.is_done() {
            let row = acc.row(&r);
            if let Some((f, path)) = curves.as_mut() {
                writeln!(f, "{row}").map_err(io_err(path.as_path()))?;
            }
        }
        if ckpt_every > 0 && done % ckpt_every == 0 && !trainer.is_done() {
            trainer.checkpoint().save(&outputs.checkpoint)?;
        }
        records.push(r);
    }
    trainer.checkpoint().save(&outputs.checkpoint)?;
    Ok(TrainOutcome { trainer, records })
}

/// Reads the dataset named by `config` and trains from scratch or from `resume`.
pub fn train(config: &RunConfig, resume: Option<&Path>, progress: impl FnMut(&TrainRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    let Some(dataset_path) = &config.dataset else {
        return Err(Error::Config("`dataset` is not set".into()));
    };
    let Some(checkpoint) = config.checkpoint.clone() else {
        return Err(Error::Config("`checkpoint` is not set".into()));
    };
    let dataset = Dataset::read(dataset_path)?;
    let trainer = match resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, Some(&config.model), &dataset)?,
        None => Trainer::new(config.model.clone(), config.train.clone(), &dataset)?,
    };
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let outputs = TrainOutputs {
        checkpoint,
        curves: config.curves.clone(),
    };
    run(trainer, &outputs, progress)
}
