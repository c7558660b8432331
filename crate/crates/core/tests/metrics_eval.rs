use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sv2p_core::autodiff::{Exec, ParamSet};
use sv2p_core::config::ModelConfig;
use sv2p_core::dataset::{generate_dataset, Dataset, ShapesConfig};
use sv2p_core::eval::*;
use sv2p_core::metrics::*;
use sv2p_core::model::init_params;

fn random_frame(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.random::<f32>()).collect()
}

#[test]
fn psnr_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a = random_frame(&mut r, 300);
    assert_eq!(psnr(&a, &a, 1.0), 99.0);
    assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
    let zeros = vec![0.0f32; 300];
    let halves = vec![0.5f32; 300];
    assert_eq!(mse(&zeros, &halves), 0.25);
    let p = psnr(&zeros, &halves, 1.0);
    assert!((p - 6.0206).abs() < 1e-4, "{p}");
    assert!((p - 10.0 * 4f64.log10()).abs() < 1e-12);
}

#[test]
fn psnr_and_ssim_are_symmetric() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random_frame(&mut r, 20 * 20 * 3);
        let b = random_frame(&mut r, 20 * 20 * 3);
        assert_eq!(psnr(&a, &b, 1.0), psnr(&b, &a, 1.0));
        assert!((ssim(&a, &b, 20, 20, 3) - ssim(&b, &a, 20, 20, 3)).abs() < 1e-12);
        assert!(psnr(&a, &b, 1.0) >= 0.0);
    }
}

#[test]
fn selection_by_psnr_ignores_monotone_rescaling_of_mse() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let mses: Vec<f64> = (0..10).map(|_| r.random_range(1e-4..0.3)).collect();
        let by_psnr: Vec<f64> = mses.iter().map(|&m| psnr_from_mse(m, 1.0)).collect();
        let neg_mse: Vec<f64> = mses.iter().map(|m| -m).collect();
        assert_eq!(argmax_first(&by_psnr), argmax_first(&neg_mse));
    }
    assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), Some(1));
    assert_eq!(argmax_first(&[]), None);
}

/// SSIM written out per window: explicit 2-D Gaussian weights, central
/// moments accumulated in a second pass.
fn ssim_oracle(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let gray = |f: &[f32]| -> Vec<f64> { f.chunks(3).map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).collect() };
    let (ga, gb) = (gray(a), gray(b));
    let mut weights = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let at = |g: &[f64], i: usize, j: usize| g[(y + i) * w + x + j];
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    mx += weights[i][j] / total * at(&ga, i, j);
                    my += weights[i][j] / total * at(&gb, i, j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = weights[i][j] / total;
                    let dx = at(&ga, i, j) - mx;
                    let dy = at(&gb, i, j) - my;
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cxy += k * dx * dy;
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_an_independent_implementation() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let a = random_frame(&mut r, 16 * 16 * 3);
    let b: Vec<f32> = a.iter().map(|&v| (0.7 * v + 0.3 * r.random::<f32>()).clamp(0.0, 1.0)).collect();
    let got = ssim(&a, &b, 16, 16, 3);
    let want = ssim_oracle(&a, &b, 16, 16);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!(got > 0.0 && got < 1.0);
}

#[test]
fn ssim_identity_inversion_and_small_frames() {
    let mut pattern = vec![0.0f32; 16 * 16 * 3];
    for y in 0..16 {
        for x in 0..16 {
            let v = if (y / 2 + x / 2) % 2 == 0 { 0.95 } else { 0.05 };
            pattern[(y * 16 + x) * 3..][..3].copy_from_slice(&[v; 3]);
        }
    }
    assert!((ssim(&pattern, &pattern, 16, 16, 3) - 1.0).abs() < 1e-12);
    let inv: Vec<f32> = pattern.iter().map(|v| 1.0 - v).collect();
    assert!(ssim(&pattern, &inv, 16, 16, 3) < 0.0);
    let small = &pattern[..8 * 8 * 3];
    assert!((ssim(small, small, 8, 8, 3) - 1.0).abs() < 1e-12);
    assert!(ssim(small, &inv[..8 * 8 * 3], 8, 8, 3) < 0.0);
}

#[test]
fn confidence_interval_follows_the_inverse_square_root_law() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let big: Vec<f64> = (0..40_000).map(|_| r.random_range(20.0..30.0)).collect();
    let quarter = mean_ci(&big[..10_000]);
    let full = mean_ci(&big);
    let ratio = quarter.ci / full.ci;
    assert!((ratio - 2.0).abs() < 0.05, "{ratio}");

    let xs = [1.0, 2.0, 3.0, 4.0];
    let ci = mean_ci(&xs);
    let sd = (5.0f64 / 3.0).sqrt();
    assert_eq!(ci.mean, 2.5);
    assert!((ci.ci - 1.96 * sd / 2.0).abs() < 1e-12);
    assert_eq!(mean_ci(&[7.0]).ci, 0.0);
}

#[test]
fn repeat_baseline_copies_the_last_context_frame() {
    let a = vec![0.1f32; 12];
    let b = vec![0.7f32; 12];
    let out = repeat_baseline(&[&a, &b], 3).unwrap();
    assert_eq!(out, vec![b.clone(); 3]);
    assert!(repeat_baseline(&[], 2).is_err());
}

#[test]
fn best_of_nested_sets_never_decreases() {
    // 1000 trials over synthetic per-sample scores of 5 videos.
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let sample_psnr: Vec<Vec<f64>> = (0..5).map(|_| (0..100).map(|_| r.random_range(10.0..40.0)).collect()).collect();
        let m = MethodResult {
            name: "m".into(),
            scores: Vec::new(),
            best: Vec::new(),
            sample_psnr,
        };
        let mut last = f64::NEG_INFINITY;
        for k in 1..=100 {
            let v = m.mean_best_of(k);
            assert!(v >= last);
            last = v;
        }
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        resolution: 16,
        frames: 4,
        enc_channels: vec![4, 4],
        inf_channels: vec![4],
        masks: 2,
        kernel_size: 3,
        ..ModelConfig::default()
    }
}

/// An untrained model whose output depends on the latent.
fn predictor(deterministic: bool) -> Predictor {
    let model = tiny_model();
    let mut p: ParamSet<f32> = init_params::<f32>(&model, 2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += 0.5 * (r.random::<f32>() - 0.5);
        }
    }
    Predictor {
        model,
        params: p,
        deterministic,
        exec: Exec::Sequential,
    }
}

fn test_set(n: usize, frames: usize) -> Dataset {
    let cfg = ShapesConfig {
        frames,
        displacement: 1,
        size_min: 2,
        size_max: 2,
        ..ShapesConfig::for_resolution(16)
    };
    generate_dataset(n, 1_000_000, &cfg, Exec::default()).unwrap()
}

#[test]
fn best_of_n_on_a_model() {
    let ds = test_set(3, 4);
    let pred = predictor(false);
    let v = &ds.videos[0];
    let b8 = best_of_n(&pred, v, 8, 3, 11).unwrap();
    let b3 = best_of_n(&pred, v, 3, 3, 11).unwrap();
    assert_eq!(b8.sample_psnr[..3], b3.sample_psnr[..]);
    assert!(b8.sample_psnr[b8.best] >= b3.sample_psnr[b3.best]);
    assert!(b8.sample_psnr.windows(2).any(|w| w[0] != w[1]), "latent has no effect");
    assert_eq!(b8.sample_psnr[b8.best], b8.sample_psnr.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    assert_eq!(b8.sample_psnr[b8.worst], b8.sample_psnr.iter().cloned().fold(f64::INFINITY, f64::min));
    let mean = b8.scores.iter().map(|s| s.psnr).sum::<f64>() / 3.0;
    assert!((mean - b8.sample_psnr[b8.best]).abs() < 1e-9);

    let b1 = best_of_n(&pred, v, 1, 3, 11).unwrap();
    let single = pred.sample_rollouts(v, 0..1, 3, 11, LatentChoice::Prior).unwrap();
    assert_eq!(b1.best_frames, single[0]);
    assert!(best_of_n(&pred, v, 0, 3, 11).is_err());
    assert!(best_of_n(&pred, v, 2, 4, 11).is_err());
}

#[test]
fn deterministic_model_gives_identical_samples() {
    let ds = test_set(1, 4);
    let pred = predictor(true);
    let b = best_of_n(&pred, &ds.videos[0], 6, 3, 1).unwrap();
    assert!(b.sample_psnr.iter().all(|&p| p == b.sample_psnr[0]));
    assert_eq!(b.best, 0);
    assert_eq!(latent_sensitivity(&pred, &ds.videos[0], 4).unwrap(), 0.0);
    assert!(latent_sensitivity(&predictor(false), &ds.videos[0], 4).unwrap() > 0.0);
}

#[test]
fn suite_rows_and_determinism() {
    let ds = test_set(4, 6);
    let methods = || {
        vec![
            Method {
                name: "sv2p".into(),
                kind: MethodKind::Model(Box::new(predictor(false))),
                trained_frames: 4,
            },
            Method {
                name: "det".into(),
                kind: MethodKind::Model(Box::new(predictor(true))),
                trained_frames: 4,
            },
            Method {
                name: "repeat".into(),
                kind: MethodKind::Repeat,
                trained_frames: 4,
            },
        ]
    };
    let protocol = |exec| Protocol {
        n: 5,
        horizon: 5,
        context: 1,
        seed: 3,
        exec,
    };
    let a = evaluate_suite(&methods(), &ds, &protocol(Exec::Parallel)).unwrap();
    let b = evaluate_suite(&methods(), &ds, &protocol(Exec::Sequential)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 5 * 3);
    let csv = a.to_csv();
    assert_eq!(csv.lines().count(), 1 + 15);
    assert_eq!(csv.lines().next().unwrap(), REPORT_HEADER);
    let extrapolated: Vec<usize> = a.rows.iter().filter(|r| r.method == "sv2p" && r.extrapolated).map(|r| r.frame).collect();
    assert_eq!(extrapolated, vec![4, 5]);
    let rep = &a.methods[2];
    assert!(rep.best.iter().all(|&b| b == 0));
    assert!(a.rows.iter().filter(|r| r.method == "repeat").all(|r| r.n_samples == 1));

    let too_long = Protocol {
        horizon: 6,
        ..protocol(Exec::Sequential)
    };
    assert!(evaluate_suite(&methods(), &ds, &too_long).is_err());
}

#[test]
fn repeat_baseline_is_perfect_on_static_video() {
    use sv2p_core::dataset::{render_video, Direction, ShapeKind, ShapeSpec};
    let spec = ShapeSpec {
        kind: ShapeKind::Circle,
        size: 4,
        aspect: 1.0,
        color: [0.1, 0.9, 0.2],
        direction: Direction::E,
        speed: 0,
    };
    let v = render_video(&spec, &ShapesConfig::for_resolution(32)).unwrap();
    let p = repeat_baseline(&[v.frame(0)], 3).unwrap();
    assert!(score_frames(&v, 1, &p).iter().all(|s| s.psnr == PSNR_CAP));
}

#[test]
fn overlapping_seed_ranges_are_rejected() {
    assert!(check_disjoint(&(0..100), &(100..200)).is_ok());
    assert!(check_disjoint(&(0..100), &(99..200)).is_err());
    assert!(check_disjoint(&(50..60), &(0..100)).is_err());
}
