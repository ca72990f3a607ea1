use super::*;
use crate::rng::RngStream;

fn randn(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Direct six-nested-loop convolution, the oracle for the im2col path.
#[allow(clippy::too_many_arguments)]
fn conv2d_naive(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for img in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - padding as isize;
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                let xv = if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize
                                {
                                    x[((img * c + ci) * h + iy as usize) * wd + ix as usize]
                                } else {
                                    0.0
                                };
                                acc += w[((fi * c + ci) * kh + ki) * kw + kj] * xv;
                            }
                        }
                    }
                    out[((img * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Triple-loop matmul oracle for linear.
fn linear_naive(x: &[f64], w: &[f64], b: &[f64], n: usize, d: usize, e: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * e];
    for row in 0..n {
        for col in 0..e {
            let mut acc = b[col];
            for k in 0..d {
                acc += x[row * d + k] * w[k * e + col];
            }
            out[row * e + col] = acc;
        }
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn conv2d_identity_kernel_scales() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
    let w = tape.leaf(&[1, 1, 1, 1], vec![2.0], false).unwrap();
    let b = tape.leaf(&[1], vec![0.0], false).unwrap();
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert!(tape.data(y).iter().all(|&v| v == 2.0));
}

#[test]
fn conv2d_bias_only() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2, 3, 4, 4], vec![0.5; 2 * 3 * 16], false).unwrap();
    let w = tape.leaf(&[2, 3, 3, 3], vec![0.0; 2 * 3 * 9], false).unwrap();
    let b = tape.leaf(&[2], vec![5.0, 5.0], false).unwrap();
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 5.0));
}

#[test]
fn conv2d_matches_naive_loop_oracle_bitwise() {
    let mut rng = RngStream::from_parts(&[41]);
    let (n, c, h, wd, f, kh, kw, stride, pad) = (2, 3, 8, 8, 4, 3, 3, 2, 1);
    let x = randn(&mut rng, n * c * h * wd);
    let w = randn(&mut rng, f * c * kh * kw);
    let b = randn(&mut rng, f);
    let oracle = conv2d_naive(&x, &w, &b, n, c, h, wd, f, kh, kw, stride, pad);

    let mut tape = Tape::<f64>::new();
    let xi = tape.leaf(&[n, c, h, wd], x, false).unwrap();
    let wi = tape.leaf(&[f, c, kh, kw], w, false).unwrap();
    let bi = tape.leaf(&[f], b, false).unwrap();
    let y = tape.conv2d(xi, wi, bi, stride, pad).unwrap();
    // The im2col fast path accumulates in the same (c, kh, kw) order as the
    // naive loops, so agreement in f64 is bitwise, not just within tolerance.
    assert_eq!(tape.data(y), oracle.as_slice());
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1, 3, 4, 4], vec![0.0; 48], false).unwrap();
    let w = tape.leaf(&[2, 4, 3, 3], vec![0.0; 72], false).unwrap();
    let b = tape.leaf(&[2], vec![0.0; 2], false).unwrap();
    let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
    assert!(err.to_string().contains("channels"));
}

#[test]
fn relu_forward_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[3], vec![-1.0, 0.0, 2.0], false).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    let neg = tape.leaf(&[4], vec![-5.0, -0.1, -2.0, -9.0], false).unwrap();
    let z = tape.relu(neg).unwrap();
    assert!(tape.data(z).iter().all(|&v| v == 0.0));
}

#[test]
fn linear_identity_and_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1, 2], vec![1.0, 2.0], false).unwrap();
    let w = tape.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
    let b = tape.leaf(&[2], vec![3.0, 3.0], false).unwrap();
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.data(y), &[4.0, 5.0]);
}

#[test]
fn linear_matches_matmul_oracle() {
    let mut rng = RngStream::from_parts(&[42]);
    let (n, d, e) = (5, 7, 4);
    let x = randn(&mut rng, n * d);
    let w = randn(&mut rng, d * e);
    let b = randn(&mut rng, e);
    let oracle = linear_naive(&x, &w, &b, n, d, e);
    let mut tape = Tape::<f64>::new();
    let xi = tape.leaf(&[n, d], x, false).unwrap();
    let wi = tape.leaf(&[d, e], w, false).unwrap();
    let bi = tape.leaf(&[e], b, false).unwrap();
    let y = tape.linear(xi, wi, bi).unwrap();
    for (a, o) in tape.data(y).iter().zip(&oracle) {
        assert!(rel_err(*a, *o) <= 1e-6);
    }
}

#[test]
fn linear_rejects_dimension_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
    let w = tape.leaf(&[4, 2], vec![0.0; 8], false).unwrap();
    let b = tape.leaf(&[2], vec![0.0; 2], false).unwrap();
    assert!(tape.linear(x, w, b).is_err());
}

#[test]
fn global_avg_pool_constant_and_identity() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1, 2, 3, 3], vec![7.0; 18], false).unwrap();
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.data(y), &[7.0, 7.0]);
    let one = tape.leaf(&[2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
    let z = tape.global_avg_pool(one).unwrap();
    assert_eq!(tape.data(z), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn global_avg_pool_matches_loop_mean() {
    let mut rng = RngStream::from_parts(&[43]);
    let (n, c, h, w) = (2, 3, 5, 4);
    let x = randn(&mut rng, n * c * h * w);
    let mut tape = Tape::<f64>::new();
    let xi = tape.leaf(&[n, c, h, w], x.clone(), false).unwrap();
    let y = tape.global_avg_pool(xi).unwrap();
    for i in 0..n * c {
        let mean: f64 = x[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        assert!(rel_err(tape.data(y)[i], mean) <= 1e-12);
    }
}

#[test]
fn l2_normalize_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1, 2], vec![3.0, 4.0], false).unwrap();
    let y = tape.l2_normalize(x, 1e-12).unwrap();
    assert!((tape.data(y)[0] - 0.6).abs() < 1e-12);
    assert!((tape.data(y)[1] - 0.8).abs() < 1e-12);
    // zero row is eps-guarded, not NaN
    let z = tape.leaf(&[1, 3], vec![0.0; 3], false).unwrap();
    let yz = tape.l2_normalize(z, 1e-12).unwrap();
    assert!(tape.data(yz).iter().all(|&v| v == 0.0));
}

#[test]
fn l2_normalize_unit_norm_property() {
    let mut rng = RngStream::from_parts(&[44]);
    for trial in 0..20 {
        let d = 3 + trial % 5;
        let x = randn(&mut rng, 4 * d);
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf(&[4, d], x, false).unwrap();
        let y = tape.l2_normalize(xi, 1e-12).unwrap();
        for row in 0..4 {
            let norm: f64 =
                tape.data(y)[row * d..(row + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2, 2], vec![1.0, -2.0, 3.0, 4.0], true).unwrap();
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_relu_masks() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2], vec![-1.0, 2.0], true).unwrap();
    let r = tape.relu(x).unwrap();
    let loss = tape.sum(r).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_double_call() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss { .. })));
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(TensorError::BackwardWithoutReset)));
    tape.zero_grads();
    tape.backward(loss).unwrap();
}

#[test]
fn backward_linearity_of_sum_of_losses() {
    let mut rng = RngStream::from_parts(&[45]);
    let xv = randn(&mut rng, 6);
    let separate: Vec<Vec<f64>> = (0..2)
        .map(|which| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&[2, 3], xv.clone(), true).unwrap();
            let r = tape.relu(x).unwrap();
            let loss = if which == 0 {
                tape.sum(r).unwrap()
            } else {
                let m = tape.mul(x, x).unwrap();
                tape.sum(m).unwrap()
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        })
        .collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2, 3], xv, true).unwrap();
    let r = tape.relu(x).unwrap();
    let l1 = tape.sum(r).unwrap();
    let m = tape.mul(x, x).unwrap();
    let l2 = tape.sum(m).unwrap();
    let total = tape.add(l1, l2).unwrap();
    tape.backward(total).unwrap();
    for (i, g) in tape.grad(x).unwrap().iter().enumerate() {
        assert!((g - (separate[0][i] + separate[1][i])).abs() <= 1e-12);
    }
}

#[test]
fn forward_is_reproducible_bitwise() {
    let mut rng = RngStream::from_parts(&[46]);
    let x = randn(&mut rng, 2 * 3 * 6 * 6);
    let w = randn(&mut rng, 4 * 3 * 3 * 3);
    let b = randn(&mut rng, 4);
    let run = || {
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf(&[2, 3, 6, 6], x.clone(), false).unwrap();
        let wi = tape.leaf(&[4, 3, 3, 3], w.clone(), false).unwrap();
        let bi = tape.leaf(&[4], b.clone(), false).unwrap();
        let y = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
        let r = tape.relu(y).unwrap();
        let p = tape.global_avg_pool(r).unwrap();
        tape.data(p).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn grad_check_sum_of_squares() {
    let params = vec![ParamSpec::new("x", &[2], vec![1.0, 2.0])];
    let report = grad_check(
        &|tape: &mut Tape<f64>, ids: &[TensorId]| {
            let m = tape.mul(ids[0], ids[0])?;
            tape.sum(m)
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max err {}", report.max_error());
    // analytic gradient is [2, 4]
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let m = tape.mul(x, x).unwrap();
    let loss = tape.sum(m).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn grad_check_negative_control_fails() {
    let params = vec![ParamSpec::new("x", &[2], vec![1.0, 2.0])];
    let report = grad_check_with_corruption(
        &|tape: &mut Tape<f64>, ids: &[TensorId]| {
            let m = tape.mul(ids[0], ids[0])?;
            tape.sum(m)
        },
        &params,
        1e-6,
        true,
    )
    .unwrap();
    assert!(!report.passed());
}

#[test]
fn every_op_passes_finite_difference_checks() {
    // >= 20 random instances across the registered op set, tol 1e-6.
    let mut rng = RngStream::from_parts(&[47]);
    for trial in 0..20u64 {
        let stride = 1 + (trial % 2) as usize;
        let params = vec![
            ParamSpec::new("x", &[1, 2, 5, 5], randn(&mut rng, 50)),
            ParamSpec::new("w", &[3, 2, 3, 3], randn(&mut rng, 54)),
            ParamSpec::new("b", &[3], randn(&mut rng, 3)),
        ];
        let f = move |tape: &mut Tape<f64>, ids: &[TensorId]| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], stride, 1)?;
            let r = tape.relu(y)?;
            let p = tape.global_avg_pool(r)?;
            let n = tape.l2_normalize(p, 1e-12)?;
            tape.sum(n)
        };
        let report = grad_check(&f, &params, 1e-6).unwrap();
        assert!(report.passed(), "trial {}: max err {}", trial, report.max_error());
    }
}

#[test]
fn composed_network_grads_match_finite_differences() {
    let mut rng = RngStream::from_parts(&[48]);
    let params = vec![
        ParamSpec::new("x", &[2, 2, 6, 6], randn(&mut rng, 144)),
        ParamSpec::new("cw", &[3, 2, 3, 3], randn(&mut rng, 54)),
        ParamSpec::new("cb", &[3], randn(&mut rng, 3)),
        ParamSpec::new("lw", &[3, 4], randn(&mut rng, 12)),
        ParamSpec::new("lb", &[4], randn(&mut rng, 4)),
    ];
    let f = |tape: &mut Tape<f64>, ids: &[TensorId]| {
        let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
        let r = tape.relu(y)?;
        let p = tape.global_avg_pool(r)?;
        let l = tape.linear(p, ids[3], ids[4])?;
        tape.sum(l)
    };
    let report = grad_check(&f, &params, 1e-6).unwrap();
    assert!(report.passed(), "max err {}", report.max_error());
}

#[test]
fn l2_normalize_gradient_matches_finite_differences() {
    let mut rng = RngStream::from_parts(&[49]);
    let params = vec![ParamSpec::new("x", &[1, 5], randn(&mut rng, 5))];
    // weight the outputs so the gradient is not the degenerate tangent case
    let weights = randn(&mut rng, 5);
    let f = move |tape: &mut Tape<f64>, ids: &[TensorId]| {
        let y = tape.l2_normalize(ids[0], 1e-12)?;
        let w = tape.leaf(&[1, 5], weights.clone(), false)?;
        let m = tape.mul(y, w)?;
        tape.sum(m)
    };
    let report = grad_check(&f, &params, 1e-4).unwrap();
    assert!(report.passed(), "max err {}", report.max_error());
}

#[test]
fn softmax_cross_entropy_and_l1_grads() {
    let mut rng = RngStream::from_parts(&[50]);
    let logits = randn(&mut rng, 3 * 4);
    let labels = vec![1usize, 0, 3];
    let params = vec![ParamSpec::new("logits", &[3, 4], logits)];
    let lab = labels.clone();
    let f = move |tape: &mut Tape<f64>, ids: &[TensorId]| tape.softmax_cross_entropy(ids[0], &lab);
    let report = grad_check(&f, &params, 1e-6).unwrap();
    assert!(report.passed(), "sce max err {}", report.max_error());

    let preds = randn(&mut rng, 6);
    let target = randn(&mut rng, 6);
    let params = vec![ParamSpec::new("preds", &[6], preds)];
    let t = target.clone();
    let f = move |tape: &mut Tape<f64>, ids: &[TensorId]| tape.l1_loss(ids[0], &t);
    let report = grad_check(&f, &params, 1e-6).unwrap();
    assert!(report.passed(), "l1 max err {}", report.max_error());
}
