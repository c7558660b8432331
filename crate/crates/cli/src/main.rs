//! `sv2p`: generate moving-shape datasets, train, sample and evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sv2p_core::autodiff::gradcheck::{primitive_suite, GradCheckOptions};
use sv2p_core::checkpoint::Checkpoint;
use sv2p_core::config::RunConfig;
use sv2p_core::dataset::{generate_dataset, Dataset, ShapesConfig};
use sv2p_core::eval::{check_disjoint, comparison_rows, evaluate_suite, LatentChoice, Method, MethodKind, Predictor, Protocol};
use sv2p_core::netcheck::network_grad_check;
use sv2p_core::ppm::write_grid;
use sv2p_core::trainer::{train, TrainRecord};
use sv2p_core::Error;

const OPS_TOLERANCE: f64 = 1e-5;
const NETWORK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "sv2p", version, about = "Stochastic video prediction on moving shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic moving-shapes dataset.
    Generate(GenerateArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Write ground truth and sampled rollouts of one video as a PPM grid.
    Sample(SampleArgs),
    /// Best-of-N evaluation of checkpoints on a held-out dataset.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Pixels moved per frame (default: resolution / 16).
    #[arg(long)]
    displacement: Option<u32>,
    /// Record per-frame actions.
    #[arg(long)]
    actions: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Single phase with the final KL weight from the first step.
    #[arg(long)]
    naive: bool,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Source {
    Prior,
    Posterior,
    /// Deterministic, posterior, best and worst of `--n`, two random samples.
    Comparison,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    video_index: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, value_enum, default_value_t = Source::Prior)]
    source: Source,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deterministic checkpoint for the comparison grid.
    #[arg(long)]
    deterministic: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint to evaluate; repeat for several. Named after the file stem.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Prior samples per video.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Predicted frames per video (default: all frames after the context).
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leave out the repeat-last-frame baseline.
    #[arg(long)]
    no_baseline: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    Ops,
    Network,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::All)]
    scope: Scope,
    /// Random trials per primitive.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the analytic gradients before comparing (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<f64>,
}

/// Failure classes and their exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn generate(a: GenerateArgs) -> Outcome {
    let mut cfg = ShapesConfig::for_resolution(a.resolution);
    cfg.frames = a.frames;
    cfg.actions = a.actions;
    if let Some(d) = a.displacement {
        cfg.displacement = d;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = generate_dataset(a.count, a.seed, &cfg, Default::default())?;
    ds.write(&a.out)?;
    println!(
        "wrote {} videos of {} frames at {}x{} (seeds {}..{}) to {}",
        ds.len(),
        cfg.frames,
        cfg.resolution,
        cfg.resolution,
        a.seed,
        a.seed + a.count as u64,
        a.out.display()
    );
    Ok(())
}

fn progress_line(r: &TrainRecord) -> String {
    format!(
        "iter {:>7}  phase {}  beta {:.2e}  recon {:.6}  kl {:.4}  total {:.6}",
        r.iteration + 1,
        r.phase.id(),
        r.beta,
        r.recon,
        r.kl,
        r.total
    )
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut cfg = RunConfig::load(&a.config)?;
    if a.naive {
        cfg.train.naive = true;
    }
    let every = cfg.train.log_every.max(1);
    let quiet = a.quiet;
    let outcome = train(&cfg, a.resume.as_deref(), |r| {
        if !quiet && (r.iteration + 1) % every == 0 {
            eprintln!("{}", progress_line(r));
        }
    })?;
    let ckpt = cfg.checkpoint.as_deref().unwrap_or(Path::new(""));
    println!(
        "trained to iteration {}; checkpoint {}",
        outcome.trainer.iteration,
        ckpt.display()
    );
    Ok(())
}

fn sample(a: SampleArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = Dataset::read(&a.dataset)?;
    let Some(video) = ds.videos.get(a.video_index) else {
        return Err(Failure::Usage(format!(
            "video index {} is out of range; the dataset has {} videos",
            a.video_index,
            ds.len()
        )));
    };
    let pred = Predictor::from_checkpoint(&ckpt);
    let c = pred.model.context;
    if video.frames <= c {
        return Err(Failure::Data(format!("video has {} frames, nothing to predict after {c}", video.frames)));
    }
    let horizon = video.frames - c;
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    if a.source != Source::Prior && video.frames < pred.model.frames {
        return Err(Failure::Usage(format!(
            "posterior sampling sees the whole target video: the model needs {} frames, the video has {}",
            pred.model.frames, video.frames
        )));
    }
    if a.deterministic.is_some() && a.source != Source::Comparison {
        return Err(Failure::Usage("--deterministic only applies to --source comparison".into()));
    }
    let rollouts = match a.source {
        Source::Prior => pred.sample_rollouts(video, 0..a.n as u64, horizon, a.seed, LatentChoice::Prior)?,
        Source::Posterior => {
            if a.n != 1 {
                return Err(Failure::Usage("the posterior source yields one rollout (its mean); use --n 1".into()));
            }
            pred.sample_rollouts(video, 0..1, horizon, a.seed, LatentChoice::PosteriorMean)?
        }
        Source::Comparison => {
            let det = match &a.deterministic {
                Some(p) => Some(Predictor::from_checkpoint(&Checkpoint::load(p)?)),
                None => None,
            };
            let rows = comparison_rows(&pred, det.as_ref(), video, a.n.max(2), a.seed)?;
            println!("rows: truth, {}", rows.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "));
            rows.into_iter().map(|(_, r)| r).collect()
        }
    };
    let truth: Vec<&[f32]> = (0..video.frames).map(|t| video.frame(t)).collect();
    let mut rows = vec![truth];
    for r in &rollouts {
        let mut row: Vec<&[f32]> = (0..c).map(|t| video.frame(t)).collect();
        row.extend(r.iter().map(Vec::as_slice));
        rows.push(row);
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::Data(format!("{}: {e}", a.out_dir.display())))?;
    let source = match a.source {
        Source::Prior => "prior",
        Source::Posterior => "posterior",
        Source::Comparison => "comparison",
    };
    let path = a.out_dir.join(format!("video{}_{source}.ppm", a.video_index));
    write_grid(&path, &rows, video.height, video.width)?;
    println!(
        "wrote {} ({} rows x {} frames)",
        path.display(),
        rows.len(),
        video.frames
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let test = Dataset::read(&a.dataset)?;
    let mut methods = Vec::new();
    let mut context = None;
    for path in &a.checkpoints {
        let ckpt = Checkpoint::load(path)?;
        check_disjoint(&ckpt.data_seeds, &test.header.seed_range())?;
        if *context.get_or_insert(ckpt.model.context) != ckpt.model.context {
            return Err(Failure::Usage("all checkpoints must use the same number of context frames".into()));
        }
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        methods.push(Method {
            name,
            trained_frames: ckpt.model.frames,
            kind: MethodKind::Model(Box::new(Predictor::from_checkpoint(&ckpt))),
        });
    }
    let context = context.expect("at least one checkpoint");
    if !a.no_baseline {
        methods.push(Method {
            name: "repeat".into(),
            kind: MethodKind::Repeat,
            trained_frames: usize::MAX,
        });
    }
    let frames = test.header.frames as usize;
    let horizon = a.horizon.unwrap_or(frames.saturating_sub(context));
    if horizon == 0 || context + horizon > frames {
        return Err(Failure::Usage(format!(
            "horizon {horizon} after {context} context frames does not fit {frames}-frame test videos"
        )));
    }
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let protocol = Protocol {
        n: a.n,
        horizon,
        context,
        seed: a.seed,
        exec: Default::default(),
    };
    let report = evaluate_suite(&methods, &test, &protocol)?;
    fs::write(&a.out, report.to_csv()).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    for m in &report.methods {
        println!("{:<24} mean PSNR {:.3} dB", m.name, m.mean_psnr());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let mut failures = Vec::new();
    if matches!(a.scope, Scope::Ops | Scope::All) {
        let reports = match a.corrupt {
            Some(factor) => {
                // The primitive suite has no hook for corruption; check one op directly.
                let opts = GradCheckOptions {
                    corrupt_analytic: Some(factor),
                    ..GradCheckOptions::default()
                };
                let x = sv2p_core::autodiff::Tensor::new([3], vec![0.3, -0.2, 0.9]).map_err(Error::from)?;
                let r = sv2p_core::autodiff::gradcheck::grad_check_with(|t, v| Ok(t.tanh(v[0])), &[x], OPS_TOLERANCE, &opts)
                    .map_err(Error::from)?;
                vec![("tanh (corrupted)", r.max_rel_error(), r.passed())]
            }
            None => primitive_suite(a.trials, a.seed, OPS_TOLERANCE)
                .map_err(Error::from)?
                .into_iter()
                .map(|r| (r.name, r.max_rel_error, r.passed))
                .collect(),
        };
        for (name, err, ok) in reports {
            println!("ops      {name:<20} max rel error {err:.3e}  {}", if ok { "pass" } else { "FAIL" });
            if !ok {
                failures.push(name.to_string());
            }
        }
    }
    if matches!(a.scope, Scope::Network | Scope::All) {
        let opts = GradCheckOptions {
            corrupt_analytic: a.corrupt,
            ..GradCheckOptions::default()
        };
        let r = network_grad_check(a.seed, NETWORK_TOLERANCE, &opts)?;
        let ok = r.passed();
        println!(
            "network  {:<20} max rel error {:.3e}  {}",
            "toy model",
            r.max_rel_error(),
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failures.push("network".into());
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failures.join(", "))))
    }
}
