//! Frame quality metrics and summary statistics.

/// Returned for (numerically) identical frames.
pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "frames differ in size");
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    s / a.len().max(1) as f64
}

/// `10·log10(max² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32], max_value: f64) -> f64 {
    psnr_from_mse(mse(a, b), max_value)
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse < MSE_FLOOR {
        return PSNR_CAP;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP)
}

fn gray(frame: &[f32], channels: usize) -> Vec<f64> {
    frame
        .chunks_exact(channels)
        .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / channels as f64)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

fn ssim_from_moments(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM of the channel-mean gray images over all valid 11×11 Gaussian
/// windows (σ = 1.5). Frames smaller than the window use one global window.
pub fn ssim(a: &[f32], b: &[f32], height: usize, width: usize, channels: usize) -> f64 {
    assert_eq!(a.len(), b.len(), "frames differ in size");
    assert_eq!(a.len(), height * width * channels, "frame size does not match its shape");
    let (ga, gb) = (gray(a, channels), gray(b, channels));
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        let n = ga.len() as f64;
        let ma = ga.iter().sum::<f64>() / n;
        let mb = gb.iter().sum::<f64>() / n;
        let va = ga.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb = gb.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
        let cov = ga.iter().zip(&gb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        return ssim_from_moments(ma, mb, va, vb, cov);
    }
    let w = gaussian_window();
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = w[i * SSIM_WINDOW + j];
                    let p = (y + i) * width + x + j;
                    let (u, v) = (ga[p], gb[p]);
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            total += ssim_from_moments(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        }
    }
    total / (oh * ow) as f64
}

/// Scores of one predicted frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean and 95% half-width `1.96·s/√n` (sample standard deviation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub ci: f64,
}

pub fn mean_ci(xs: &[f64]) -> MeanCi {
    let n = xs.len();
    if n == 0 {
        return MeanCi { mean: f64::NAN, ci: f64::NAN };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return MeanCi { mean, ci: 0.0 };
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    MeanCi {
        mean,
        ci: 1.96 * var.sqrt() / (n as f64).sqrt(),
    }
}

/// Sample mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some(b) if xs[b] >= x => {}
            _ if x.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized() {
        let s: f64 = gaussian_window().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_first(&[]), None);
        assert_eq!(argmax_first(&[f64::NAN, 0.5]), Some(1));
    }
}
