use sha2::{Digest, Sha256};
use sv2p_core::autodiff::{Exec, ParamSet};
use sv2p_core::checkpoint::Checkpoint;
use sv2p_core::config::{LatentMode, ModelConfig, RunConfig, TrainConfig, KEY_DOCS, MODEL_KEYS, PATH_KEYS, TRAIN_KEYS};
use sv2p_core::dataset::{generate_dataset, Dataset, ShapesConfig};
use sv2p_core::trainer::*;
use sv2p_core::Error;

fn model() -> ModelConfig {
    ModelConfig {
        resolution: 16,
        frames: 3,
        enc_channels: vec![4, 4],
        inf_channels: vec![4],
        masks: 2,
        kernel_size: 3,
        latent_mode: LatentMode::TimeVariant,
        ..ModelConfig::default()
    }
}

fn train_cfg(p1: u64, p2: u64, p3: u64) -> TrainConfig {
    TrainConfig {
        batch: 2,
        seed: 17,
        phase1: p1,
        phase2: p2,
        phase3: p3,
        log_every: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn data() -> Dataset {
    let cfg = ShapesConfig {
        frames: 3,
        displacement: 1,
        ..ShapesConfig::for_resolution(16)
    };
    generate_dataset(12, 0, &cfg, Exec::default()).unwrap()
}

fn hash(params: &ParamSet<f32>, prefix: &str) -> Vec<u8> {
    let mut h = Sha256::new();
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().to_vec()
}

#[test]
fn phase_one_leaves_the_inference_network_untouched() {
    let ds = data();
    let mut t = Trainer::new(model(), train_cfg(3, 2, 2), &ds).unwrap();
    let (inf0, gen0) = (hash(&t.params, "inf/"), hash(&t.params, "gen/"));
    for _ in 0..3 {
        let r = t.step().unwrap();
        assert_eq!(r.phase, Phase::Prior);
        assert_eq!((r.kl, r.beta), (0.0, 0.0));
        assert_eq!(r.total, r.recon);
    }
    assert_eq!(hash(&t.params, "inf/"), inf0);
    assert_ne!(hash(&t.params, "gen/"), gen0);
    let r = t.step().unwrap();
    assert_eq!(r.phase, Phase::Posterior);
    assert_eq!(r.beta, 0.0);
    assert!(r.kl >= 0.0);
    t.step().unwrap();
    assert_ne!(hash(&t.params, "inf/"), inf0);
    let r = t.step().unwrap();
    assert_eq!(r.phase, Phase::Annealed);
    assert!(r.beta > 0.0);
    assert!((r.total - (r.recon + r.beta * r.kl)).abs() < 1e-9 * r.total.abs().max(1.0));
}

fn records(p: (u64, u64, u64)) -> Vec<TrainRecord> {
    let ds = data();
    let mut t = Trainer::new(model(), train_cfg(p.0, p.1, p.2), &ds).unwrap();
    let mut out = Vec::new();
    while !t.is_done() {
        let mut r = t.step().unwrap();
        r.wall_ms = 0;
        out.push(r);
    }
    out
}

#[test]
fn same_seed_gives_identical_curves() {
    let a = records((2, 2, 2));
    let b = records((2, 2, 2));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.recon.is_finite() && r.recon > 0.0));
}

#[test]
fn execution_mode_does_not_change_training() {
    let ds = data();
    let run = |exec| {
        let mut t = Trainer::new(model(), train_cfg(2, 2, 2), &ds).unwrap();
        t.exec = exec;
        while !t.is_done() {
            t.step().unwrap();
        }
        hash(&t.params, "")
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

#[test]
fn resume_is_bitwise_equivalent() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(model(), train_cfg(4, 3, 3), &ds).unwrap();
    while !straight.is_done() {
        straight.step().unwrap();
    }

    let mut first = Trainer::new(model(), train_cfg(4, 3, 3), &ds).unwrap();
    for _ in 0..5 {
        first.step().unwrap();
    }
    let path = dir.path().join("half.ckpt");
    first.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.cursor.iteration, 5);
    assert_eq!(ck.cursor.phase, Phase::Posterior);
    let mut second = Trainer::resume(ck, Some(&model()), &ds).unwrap();
    while !second.is_done() {
        second.step().unwrap();
    }
    assert_eq!(hash(&second.params, ""), hash(&straight.params, ""));
    assert_eq!(second.params, straight.params);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ds = data();
    let mut t = Trainer::new(model(), train_cfg(1, 1, 1), &ds).unwrap();
    t.step().unwrap();
    t.step().unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params, ck.params);
    for ((n1, a), (n2, b)) in back.params.iter().zip(ck.params.iter()) {
        assert_eq!(n1, n2);
        let bits = |t: &sv2p_core::autodiff::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back.model, ck.model);
    assert_eq!(back.train, ck.train);
    assert_eq!(back.cursor, ck.cursor);
    assert_eq!(back.data_seeds, 0..12);

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn architecture_mismatch_is_rejected() {
    let ds = data();
    let t = Trainer::new(model(), train_cfg(1, 1, 1), &ds).unwrap();
    let ck = t.checkpoint();
    let other = ModelConfig {
        masks: 3,
        ..model()
    };
    let err = Trainer::resume(ck.clone(), Some(&other), &ds).err().unwrap().to_string();
    assert!(err.contains("masks"), "{err}");
    assert!(ck.check_architecture(&model()).is_ok());
}

#[test]
fn short_videos_are_rejected() {
    let short = generate_dataset(
        4,
        0,
        &ShapesConfig {
            frames: 2,
            ..ShapesConfig::for_resolution(16)
        },
        Exec::default(),
    )
    .unwrap();
    assert!(Trainer::new(model(), train_cfg(1, 1, 1), &short).is_err());
}

#[test]
fn naive_mode_uses_the_posterior_and_final_beta_from_the_start() {
    let ds = data();
    let mut cfg = train_cfg(1, 1, 1);
    cfg.naive = true;
    let mut t = Trainer::new(model(), cfg, &ds).unwrap();
    let inf0 = hash(&t.params, "inf/");
    let r = t.step().unwrap();
    assert_eq!(r.phase, Phase::Naive);
    assert_eq!(r.beta, 1e-3);
    assert!(r.kl >= 0.0);
    assert_ne!(hash(&t.params, "inf/"), inf0);
}

#[test]
fn file_backed_run_writes_curves_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = dir.path().join("train.svds");
    data().write(&ds_path).unwrap();
    let text = format!(
        "# tiny run\nresolution = 16\nframes = 3\nenc_channels = 4,4\ninf_channels = 4\nmasks = 2\nkernel_size = 3\n\
         batch = 2\nseed = 17\nphase1 = 2\nphase2 = 2\nphase3 = 2\nlog_every = 2\ncheckpoint_every = 3\n\
         dataset = {}\ncheckpoint = {}\ncurves = {}\n",
        ds_path.display(),
        dir.path().join("out/m.ckpt").display(),
        dir.path().join("c.csv").display()
    );
    let cfg = RunConfig::parse(&text).unwrap();
    let out = train(&cfg, None, |_| {}).unwrap();
    assert_eq!(out.records.len(), 6);
    let csv = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CURVE_HEADER);
    assert_eq!(lines.len(), 4);
    let iters: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["2", "4", "6"]);
    let phases: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases, ["1", "2", "3"]);
    let ck = Checkpoint::load(&dir.path().join("out/m.ckpt")).unwrap();
    assert!(ck.is_finished());
    assert_eq!(ck.cursor.iteration, 6);

    // Resuming a finished run is a no-op.
    let again = train(&cfg, Some(&dir.path().join("out/m.ckpt")), |_| {}).unwrap();
    assert!(again.records.is_empty());
    assert_eq!(again.trainer.params, ck.params);
}

#[test]
fn run_config_round_trips_and_rejects_unknown_keys() {
    let cfg = RunConfig {
        dataset: Some("d.svds".into()),
        ..RunConfig::default()
    };
    let back = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    let err = RunConfig::parse("resolution = 32\nwarp_speed = 9\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("warp_speed"));
    assert!(RunConfig::parse("batch = zero\n").is_err());
    assert!(RunConfig::parse("# only a comment\n\n").unwrap() == RunConfig::default());
}

#[test]
fn every_key_is_documented() {
    let documented: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
    let all: Vec<&str> = MODEL_KEYS.iter().chain(&TRAIN_KEYS).chain(&PATH_KEYS).copied().collect();
    assert_eq!(documented, all);
}

#[test]
fn defaults_match_the_full_scale_hyper_parameters() {
    let t = TrainConfig::default();
    assert_eq!(t.batch, 16);
    assert_eq!(t.learning_rate, 1e-3);
    assert_eq!(t.ss_k, 900.0);
    assert_eq!((t.phase1, t.phase2, t.phase3), (50_000, 50_000, 100_000));
    assert_eq!(t.beta_final, 1e-3);
    let m = ModelConfig::default();
    assert_eq!(m.masks, 10);
    assert_eq!(m.latent_channels, 1);
    assert_eq!(m.min_log_sigma, -5.0);
    assert_eq!(m.resolution, 64);
    assert_eq!((m.frames, m.context), (4, 1));
}

#[test]
fn resuming_drops_curve_rows_past_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = dir.path().join("train.svds");
    data().write(&ds_path).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let curves = dir.path().join("c.csv");
    let text = format!(
        "resolution = 16\nframes = 3\nenc_channels = 4,4\ninf_channels = 4\nmasks = 2\nkernel_size = 3\n\
         batch = 2\nseed = 17\nphase1 = 2\nphase2 = 2\nphase3 = 2\nlog_every = 2\n\
         dataset = {}\ncheckpoint = {}\ncurves = {}\n",
        ds_path.display(),
        ckpt.display(),
        curves.display()
    );
    let cfg = RunConfig::parse(&text).unwrap();
    let mut t = Trainer::new(cfg.model.clone(), cfg.train.clone(), &data()).unwrap();
    for _ in 0..4 {
        t.step().unwrap();
    }
    t.checkpoint().save(&ckpt).unwrap();
    // Rows up to 6 as if the interrupted run had logged past its last checkpoint.
    std::fs::write(&curves, format!("{CURVE_HEADER}\n2,1,0,1,0,1,0\n4,2,0,1,0,1,0\n6,3,0,1,0,1,0\n")).unwrap();
    train(&cfg, Some(&ckpt), |_| {}).unwrap();
    let csv = std::fs::read_to_string(&curves).unwrap();
    let iters: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["2", "4", "6"]);
    assert!(csv.lines().nth(2).unwrap().starts_with("4,2,0,1,"));
    assert!(!csv.lines().nth(3).unwrap().starts_with("6,3,0,1,0,1,0"));
}
