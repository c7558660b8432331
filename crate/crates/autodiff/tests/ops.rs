use proptest::prelude::*;
use sv2p_autodiff::gradcheck::{grad_check, primitive_suite, PRIMITIVES};
use sv2p_autodiff::{conv_lstm_cell, ConvLstmParams, Padding, Tape, Tensor};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct sliding-window correlation with zero padding, single channel.
fn window_oracle(img: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for i in 0..k as isize {
                for j in 0..k as isize {
                    let (sy, sx) = (y + i - p, x + j - p);
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        s += kernel[(i * k as isize + j) as usize] * img[(sy * w as isize + sx) as usize];
                    }
                }
            }
            out[(y * w as isize + x) as usize] = s;
        }
    }
    out
}

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros([1, 3, 3, 1]));
    let k = tape.constant(t(&[3, 3, 1, 1], (0..9).map(|i| i as f64 - 4.0).collect()));
    let y = tape.conv2d(x, k, 1, Padding::SameZero).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_unit_kernel_is_identity() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
    let x = tape.constant(t(&[1, 3, 3, 1], data.clone()));
    let k = tape.constant(t(&[1, 1, 1, 1], vec![1.0]));
    let y = tape.conv2d(x, k, 1, Padding::SameZero).unwrap();
    assert_eq!(tape.value(y), data.as_slice());
}

#[test]
fn conv2d_box_filter_matches_window_sums() {
    let img: Vec<f64> = (1..=16).map(f64::from).collect();
    let kernel = vec![1.0 / 9.0; 9];
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 4, 4, 1], img.clone()));
    let k = tape.constant(t(&[3, 3, 1, 1], kernel.clone()));
    let y = tape.conv2d(x, k, 1, Padding::SameZero).unwrap();
    let expected = window_oracle(&img, 4, 4, &kernel, 3);
    for (a, b) in tape.value(y).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((tape.value(y)[4 + 1] - 6.0).abs() < 1e-12);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 4, 4, 2]));
    let k = tape.constant(Tensor::zeros([3, 3, 3, 1]));
    let err = tape.conv2d(x, k, 1, Padding::SameZero).unwrap_err().to_string();
    assert!(err.contains("[1, 4, 4, 2]") && err.contains("[3, 3, 3, 1]"));
}

#[test]
fn conv2d_gradient_on_spec_instance() {
    let x = Tensor::from_fn([1, 5, 5, 2], |i| ((i * 37 % 11) as f64 / 11.0) - 0.5);
    let k = Tensor::from_fn([3, 3, 2, 2], |i| ((i * 13 % 7) as f64 / 7.0) - 0.4);
    let report = grad_check(|t, v| t.conv2d(v[0], v[1], 1, Padding::SameZero), &[x, k], 1e-5).unwrap();
    assert!(report.passed(), "{report:?}");
}

fn scalar_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn conv_lstm_zero_network_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 3, 3, 2]));
    let h = tape.constant(Tensor::zeros([1, 3, 3, 2]));
    let c = tape.constant(Tensor::zeros([1, 3, 3, 2]));
    let kernel = tape.constant(Tensor::zeros([3, 3, 4, 8]));
    let bias = tape.constant(Tensor::zeros([8]));
    let (h2, c2) = conv_lstm_cell(&mut tape, x, h, c, ConvLstmParams { kernel, bias }).unwrap();
    assert!(tape.value(h2).iter().all(|&v| v == 0.0));
    assert!(tape.value(c2).iter().all(|&v| v == 0.0));
}

#[test]
fn conv_lstm_saturated_forget_gate_keeps_cell() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn([1, 2, 2, 1], |i| i as f64 * 0.3));
    let h = tape.constant(Tensor::from_fn([1, 2, 2, 1], |i| 0.1 - i as f64 * 0.05));
    let cell = Tensor::from_fn([1, 2, 2, 1], |i| 0.7 - i as f64 * 0.4);
    let c = tape.constant(cell.clone());
    let kernel = tape.constant(Tensor::zeros([3, 3, 2, 4]));
    let bias = tape.constant(t(&[4], vec![0.0, 20.0, 0.0, 0.0]));
    let (_, c2) = conv_lstm_cell(&mut tape, x, h, c, ConvLstmParams { kernel, bias }).unwrap();
    for (a, b) in tape.value(c2).iter().zip(cell.data()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn conv_lstm_matches_scalar_recomputation() {
    // B=1, H=W=2, Cin=Ch=1, 3x3 gate kernels.
    let x: Vec<f64> = vec![0.3, -0.7, 0.5, 0.1];
    let h: Vec<f64> = vec![-0.2, 0.4, 0.0, 0.6];
    let c: Vec<f64> = vec![0.9, -0.3, 0.2, -0.8];
    let kernel: Vec<f64> = (0..3 * 3 * 2 * 4).map(|i| ((i * 29 % 17) as f64 / 17.0 - 0.5) * 0.8).collect();
    let bias = vec![0.1, 0.5, -0.2, 0.05];

    let mut tape = Tape::new();
    let vx = tape.constant(t(&[1, 2, 2, 1], x.clone()));
    let vh = tape.constant(t(&[1, 2, 2, 1], h.clone()));
    let vc = tape.constant(t(&[1, 2, 2, 1], c.clone()));
    let vk = tape.constant(t(&[3, 3, 2, 4], kernel.clone()));
    let vb = tape.constant(t(&[4], bias.clone()));
    let (h2, c2) = conv_lstm_cell(&mut tape, vx, vh, vc, ConvLstmParams { kernel: vk, bias: vb }).unwrap();

    for py in 0..2i32 {
        for px in 0..2i32 {
            let mut pre = bias.clone();
            for ky in 0..3i32 {
                for kx in 0..3i32 {
                    let (sy, sx) = (py + ky - 1, px + kx - 1);
                    if !(0..2).contains(&sy) || !(0..2).contains(&sx) {
                        continue;
                    }
                    let p = (sy * 2 + sx) as usize;
                    let inputs = [x[p], h[p]];
                    for (ci, &v) in inputs.iter().enumerate() {
                        for (gate, acc) in pre.iter_mut().enumerate() {
                            *acc += kernel[(((ky * 3 + kx) as usize) * 2 + ci) * 4 + gate] * v;
                        }
                    }
                }
            }
            let p = (py * 2 + px) as usize;
            let (i, f, o, g) = (
                scalar_sigmoid(pre[0]),
                scalar_sigmoid(pre[1]),
                scalar_sigmoid(pre[2]),
                pre[3].tanh(),
            );
            let cn = f * c[p] + i * g;
            let hn = o * cn.tanh();
            assert!((tape.value(c2)[p] - cn).abs() < 1e-6);
            assert!((tape.value(h2)[p] - hn).abs() < 1e-6);
        }
    }
}

#[test]
fn conv_lstm_rejects_spatial_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 4, 4, 1]));
    let h = tape.constant(Tensor::zeros([1, 2, 2, 1]));
    let c = tape.constant(Tensor::zeros([1, 2, 2, 1]));
    let kernel = tape.constant(Tensor::zeros([3, 3, 2, 4]));
    let bias = tape.constant(Tensor::zeros([4]));
    assert!(conv_lstm_cell(&mut tape, x, h, c, ConvLstmParams { kernel, bias }).is_err());
}

#[test]
fn activations_at_zero() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([1]));
    let s = tape.sigmoid(z);
    let th = tape.tanh(z);
    assert_eq!(tape.scalar(s), 0.5);
    assert_eq!(tape.scalar(th), 0.0);
}

#[test]
fn sigmoid_slope_at_zero_matches_central_difference() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros([1]));
    let y = tape.sigmoid(x);
    tape.backward(y).unwrap();
    let analytic = tape.grad(x).unwrap()[0];
    let h = 1e-5;
    let numeric = (scalar_sigmoid(h) - scalar_sigmoid(-h)) / (2.0 * h);
    assert!((analytic - 0.25).abs() < 1e-15);
    assert!((analytic - numeric).abs() < 1e-8);
}

#[test]
fn tile_spatial_broadcasts_channels() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(t(&[1, 2], vec![1.0, 2.0]));
    let m = tape.tile_spatial(v, 2, 2).unwrap();
    assert_eq!(tape.shape(m), &[1, 2, 2, 2]);
    assert_eq!(tape.value(m), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
}

#[test]
fn clamp_min_blocks_gradient_below_threshold() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], vec![-6.0, -5.0, -1.0]));
    let y = tape.clamp_min(x, -5.0);
    assert_eq!(tape.value(y), &[-5.0, -5.0, -1.0]);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn elementwise_shape_mismatch_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
}

fn softmax_of(logits: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 1, logits.len()], logits.to_vec()));
    let y = tape.softmax_channels(x).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn softmax_examples() {
    assert!(softmax_of(&[0.7; 4]).iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let big = softmax_of(&[1000.0, 0.0]);
    assert!(big.iter().all(|p| p.is_finite()));
    assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-12);
    // direct exp/sum evaluation
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    let got = softmax_of(&[1.0, 2.0, 3.0]);
    for ((g, ei), want) in got.iter().zip(&e).zip([0.09003, 0.24473, 0.66524]) {
        assert!((g - ei / z).abs() < 1e-12);
        assert!((g - want).abs() < 1e-4);
    }
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], vec![0.5, -1.0, 2.0]));
    let w = tape.param(t(&[3], vec![1.5, 0.25, -0.5]));
    let p = tape.mul(x, w).unwrap();
    let s = tape.tanh(p);
    let l = tape.reduce_sum(s);
    tape.backward(l).unwrap();
    let g1 = tape.grad(x).unwrap().to_vec();
    let gw1 = tape.grad(w).unwrap().to_vec();
    tape.backward(l).unwrap();
    for (a, b) in tape.grad(x).unwrap().iter().zip(&g1) {
        assert_eq!(*a, 2.0 * b);
    }
    for (a, b) in tape.grad(w).unwrap().iter().zip(&gw1) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn backward_visits_in_reverse_execution_order() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], vec![0.5, 1.0]));
    let a = tape.exp(x);
    let b = tape.square(a);
    let c = tape.reduce_mean(b);
    let report = tape.backward(c).unwrap();
    assert_eq!(report.visited, vec![c, b, a, x]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], vec![0.5, 1.0]));
    let k = tape.constant(t(&[2], vec![3.0, 4.0]));
    let y = tape.mul(x, k).unwrap();
    let l = tape.reduce_sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(tape.grad(k).is_none());
}

#[test]
fn every_primitive_passes_gradcheck_over_100_trials() {
    let reports = primitive_suite(100, 2024, 1e-5).unwrap();
    assert_eq!(reports.len(), PRIMITIVES.len());
    for r in &reports {
        assert!(r.passed, "{} failed: max rel error {:e}", r.name, r.max_rel_error);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax_of(&logits);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_kernel_is_bitwise_identity(
        h in 1usize..6, w in 1usize..6, c in 1usize..4,
        seed in any::<u64>(),
        replicate in any::<bool>(),
    ) {
        let x = Tensor::from_fn([1, h, w, c], |i| ((seed.wrapping_add(i as u64 * 2654435761)) % 10007) as f64 / 977.0 - 5.0);
        let mut kernel = Tensor::<f64>::zeros([3, 3, c, c]);
        for ci in 0..c {
            kernel.data_mut()[(4 * c + ci) * c + ci] = 1.0;
        }
        let padding = if replicate { Padding::SameReplicate } else { Padding::SameZero };
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let vk = tape.constant(kernel);
        let y = tape.conv2d(vx, vk, 1, padding).unwrap();
        prop_assert_eq!(tape.value(y), x.data());
    }
}
