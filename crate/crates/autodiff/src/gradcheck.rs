//! Finite-difference verification of reverse-mode gradients.
//!
//! A non-scalar output `y` is reduced to `L = Σ wᵢ yᵢ` with fixed random
//! weights, so every output entry contributes a distinct direction. Each
//! checked coordinate is perturbed by `±h·max(1, |x|)` and the central
//! difference is compared against the tape's gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lstm::{conv_lstm_cell, ConvLstmParams};
use crate::{Padding, Tape, Tensor, Var};

/// Below this gradient magnitude errors are measured in absolute terms.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Relative finite-difference step.
    pub step: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparing; a negative control.
    pub corrupt_analytic: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0x5eed,
            corrupt_analytic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub index: usize,
    pub checked: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / max(max |numeric|, floor)`
    pub max_rel_error: f64,
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.finite && c.max_rel_error <= self.tolerance)
    }
}

fn reduce(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), weights.to_vec())?);
    let prod = tape.mul(out, w)?;
    Ok(tape.reduce_sum(prod))
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], weights: &mut Vec<f64>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if weights.is_empty() {
        *weights = reduction_weights(tape.value(out).len(), seed);
    }
    let loss = reduce(&mut tape, out, weights)?;
    Ok(tape.scalar(loss))
}

fn reduction_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n)
        .map(|_| {
            let w: f64 = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                w
            } else {
                -w
            }
        })
        .collect()
}

fn pick_coords(n: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < n => rand::seq::index::sample(rng, n, m).into_vec(),
        _ => (0..n).collect(),
    }
}

/// Compares tape gradients of `f` against central finite differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, tolerance, &GradCheckOptions::default())
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let weights = reduction_weights(tape.value(out).len(), opts.seed);
    let loss = reduce(&mut tape, out, &weights)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = tape.grad(var).unwrap_or(&zeros);
        let coords = pick_coords(input.numel(), opts.max_coords, &mut rng);
        let mut perturbed = inputs.to_vec();
        let mut max_abs = 0.0f64;
        let mut max_num = 0.0f64;
        let mut finite = true;
        for &j in &coords {
            let x = input.data()[j];
            let h = opts.step * x.abs().max(1.0);
            let mut w = weights.clone();
            perturbed[idx].data_mut()[j] = x + h;
            let up = evaluate(&f, &perturbed, &mut w, opts.seed)?;
            perturbed[idx].data_mut()[j] = x - h;
            let down = evaluate(&f, &perturbed, &mut w, opts.seed)?;
            perturbed[idx].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[j] * opts.corrupt_analytic.unwrap_or(1.0);
            if !numeric.is_finite() || !a.is_finite() {
                finite = false;
                continue;
            }
            max_abs = max_abs.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        let max_rel = if finite {
            max_abs / max_num.max(REL_FLOOR)
        } else {
            f64::INFINITY
        };
        reports.push(InputCheck {
            index: idx,
            checked: coords.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            finite,
        });
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance,
    })
}

// ---- primitive suite -------------------------------------------------------

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One randomised instance of a primitive under test.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub op: CaseFn,
}

#[derive(Clone, Debug)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in [0.1, 1] so that kinks at zero are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn small_nhwc(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(2..=4),
        rng.random_range(2..=4),
        rng.random_range(1..=3),
    ]
}

/// Names of every primitive covered by [`primitive_case`].
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "square",
    "clamp_min",
    "add_bias",
    "matmul",
    "conv2d_same_zero",
    "conv2d_same_replicate",
    "conv2d_valid",
    "conv2d_stride2",
    "concat_channels",
    "slice",
    "reshape",
    "tile_spatial",
    "upsample_nearest",
    "resize_nearest",
    "reduce_sum",
    "reduce_mean",
    "softmax_channels",
    "instance_norm",
    "depthwise_kernels",
    "mask_composite",
    "conv_lstm_cell",
];

/// Builds a random instance of the named primitive.
pub fn primitive_case(name: &'static str, rng: &mut ChaCha8Rng) -> Option<PrimitiveCase> {
    let s = small_nhwc(rng);
    let case = |inputs: Vec<Tensor<f64>>, op: CaseFn| PrimitiveCase { name, inputs, op };
    let conv = |rng: &mut ChaCha8Rng, k: usize, stride: usize, padding: Padding| {
        let mut s = s.clone();
        s[1] = s[1].max(k) + 1;
        s[2] = s[2].max(k);
        let cout = rng.random_range(1..=3);
        let x = rand_tensor(rng, &s, -1.0, 1.0);
        let w = rand_tensor(rng, &[k, k, s[3], cout], -1.0, 1.0);
        case(
            vec![x, w],
            Box::new(move |t, v| t.conv2d(v[0], v[1], stride, padding)),
        )
    };
    Some(match name {
        "add" => case(
            vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "sub" => case(
            vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        "mul" => case(
            vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        "scale" => {
            let c: f64 = rng.random_range(-2.0..2.0);
            case(vec![rand_tensor(rng, &s, -1.0, 1.0)], Box::new(move |t, v| Ok(t.scale(v[0], c))))
        }
        "add_scalar" => {
            let c: f64 = rng.random_range(-2.0..2.0);
            case(vec![rand_tensor(rng, &s, -1.0, 1.0)], Box::new(move |t, v| Ok(t.add_scalar(v[0], c))))
        }
        "relu" => case(vec![away_from_zero(rng, &s)], Box::new(|t, v| Ok(t.relu(v[0])))),
        "sigmoid" => case(vec![rand_tensor(rng, &s, -3.0, 3.0)], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        "tanh" => case(vec![rand_tensor(rng, &s, -2.0, 2.0)], Box::new(|t, v| Ok(t.tanh(v[0])))),
        "exp" => case(vec![rand_tensor(rng, &s, -2.0, 2.0)], Box::new(|t, v| Ok(t.exp(v[0])))),
        "log" => case(vec![rand_tensor(rng, &s, 0.5, 2.0)], Box::new(|t, v| Ok(t.log(v[0])))),
        "square" => case(vec![rand_tensor(rng, &s, -1.0, 1.0)], Box::new(|t, v| Ok(t.square(v[0])))),
        "clamp_min" => case(vec![away_from_zero(rng, &s)], Box::new(|t, v| Ok(t.clamp_min(v[0], 0.0)))),
        "add_bias" => {
            let b = rand_tensor(rng, &[s[3]], -1.0, 1.0);
            case(vec![rand_tensor(rng, &s, -1.0, 1.0), b], Box::new(|t, v| t.add_bias(v[0], v[1])))
        }
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            case(
                vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[k, n], -1.0, 1.0)],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }
        "conv2d_same_zero" => conv(rng, 3, 1, Padding::SameZero),
        "conv2d_same_replicate" => conv(rng, 3, 1, Padding::SameReplicate),
        "conv2d_valid" => conv(rng, 3, 1, Padding::Valid),
        "conv2d_stride2" => conv(rng, 3, 2, Padding::SameZero),
        "concat_channels" => {
            let mut s2 = s.clone();
            s2[3] = rng.random_range(1..=3);
            case(
                vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s2, -1.0, 1.0)],
                Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
            )
        }
        "slice" => {
            let mut s = s.clone();
            s[3] = 3;
            let start = rng.random_range(0..2);
            case(vec![rand_tensor(rng, &s, -1.0, 1.0)], Box::new(move |t, v| t.slice(v[0], 3, start, 2)))
        }
        "reshape" => {
            let flat = [s.iter().product::<usize>()];
            case(vec![rand_tensor(rng, &s, -1.0, 1.0)], Box::new(move |t, v| t.reshape(v[0], &flat)))
        }
        "tile_spatial" => {
            let (b, c) = (s[0], s[3]);
            let (h, w) = (s[1], s[2]);
            case(
                vec![rand_tensor(rng, &[b, c], -1.0, 1.0)],
                Box::new(move |t, v| t.tile_spatial(v[0], h, w)),
            )
        }
        "upsample_nearest" => case(
            vec![rand_tensor(rng, &s, -1.0, 1.0)],
            Box::new(|t, v| t.upsample_nearest(v[0], 2)),
        ),
        "resize_nearest" => {
            let (oh, ow) = (rng.random_range(1..=5), rng.random_range(1..=5));
            case(
                vec![rand_tensor(rng, &s, -1.0, 1.0)],
                Box::new(move |t, v| t.resize_nearest(v[0], oh, ow)),
            )
        }
        "reduce_sum" => case(vec![rand_tensor(rng, &s, -1.0, 1.0)], Box::new(|t, v| Ok(t.reduce_sum(v[0])))),
        "reduce_mean" => case(vec![rand_tensor(rng, &s, -1.0, 1.0)], Box::new(|t, v| Ok(t.reduce_mean(v[0])))),
        "softmax_channels" => {
            let mut s = s.clone();
            s[3] += 1;
            case(vec![rand_tensor(rng, &s, -3.0, 3.0)], Box::new(|t, v| t.softmax_channels(v[0])))
        }
        "instance_norm" => {
            let mut s = s.clone();
            s[1] = s[1].max(2) + 1;
            case(vec![rand_tensor(rng, &s, -1.0, 1.0)], Box::new(|t, v| t.instance_norm(v[0], 1e-5)))
        }
        "depthwise_kernels" => {
            let m = rng.random_range(1..=3);
            let k = if rng.random::<bool>() { 3 } else { 1 };
            case(
                vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &[s[0], m, k, k], -1.0, 1.0)],
                Box::new(|t, v| t.depthwise_kernels(v[0], v[1])),
            )
        }
        "mask_composite" => {
            let l = rng.random_range(1..=4);
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            case(
                vec![
                    rand_tensor(rng, &[b, h, w, l, c], -1.0, 1.0),
                    rand_tensor(rng, &[b, h, w, l], 0.0, 1.0),
                ],
                Box::new(|t, v| t.mask_composite(v[0], v[1])),
            )
        }
        "conv_lstm_cell" => {
            let ch = rng.random_range(1..=2);
            let mut hs = s.clone();
            hs[3] = ch;
            let cin = s[3];
            case(
                vec![
                    rand_tensor(rng, &s, -1.0, 1.0),
                    rand_tensor(rng, &hs, -1.0, 1.0),
                    rand_tensor(rng, &hs, -1.0, 1.0),
                    rand_tensor(rng, &[3, 3, cin + ch, 4 * ch], -0.5, 0.5),
                    rand_tensor(rng, &[4 * ch], -0.5, 0.5),
                ],
                Box::new(|t, v| {
                    let (h, c) = conv_lstm_cell(t, v[0], v[1], v[2], ConvLstmParams { kernel: v[3], bias: v[4] })?;
                    t.concat_channels(&[h, c])
                }),
            )
        }
        _ => return None,
    })
}

/// Runs `trials` randomised gradient checks of every primitive.
pub fn primitive_suite(trials: usize, seed: u64, tolerance: f64) -> Result<Vec<PrimitiveReport>> {
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for (pi, &name) in PRIMITIVES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pi as u64);
        let mut worst = 0.0f64;
        let mut passed = true;
        for trial in 0..trials {
            let case = primitive_case(name, &mut rng).expect("listed primitive");
            let opts = GradCheckOptions {
                seed: seed.wrapping_add(trial as u64),
                ..GradCheckOptions::default()
            };
            let report = grad_check_with(case.op, &case.inputs, tolerance, &opts)?;
            worst = worst.max(report.max_rel_error());
            passed &= report.passed();
        }
        out.push(PrimitiveReport {
            name,
            trials,
            max_rel_error: worst,
            passed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_matches_to_machine_precision() {
        let x = Tensor::new([2, 3], vec![0.1, -0.4, 2.0, 3.5, -1.0, 0.25]).unwrap();
        let report = grad_check(|t, v| Ok(t.scale(v[0], 1.7)), &[x], 1e-10).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error() <= 1e-10);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::new([3], vec![0.3, -0.2, 0.9]).unwrap();
        let opts = GradCheckOptions {
            corrupt_analytic: Some(2.0),
            ..GradCheckOptions::default()
        };
        let report = grad_check_with(|t, v| Ok(t.tanh(v[0])), &[x], 1e-5, &opts).unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error() - 1.0).abs() < 1e-6, "{}", report.max_rel_error());
    }

    #[test]
    fn non_finite_values_fail() {
        let x = Tensor::new([2], vec![-1.0, 2.0]).unwrap();
        let report = grad_check(|t, v| Ok(t.log(v[0])), &[x], 1e-5).unwrap();
        assert!(!report.passed());
        assert!(!report.inputs[0].finite);
    }

    #[test]
    fn every_listed_primitive_has_a_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &name in PRIMITIVES {
            assert!(primitive_case(name, &mut rng).is_some(), "{name}");
        }
    }
}
